//! Cross-entropy training of soft tree ensembles with Adam.
//!
//! Gradients are derived by hand. For a leaf `l` whose path passes slot `n`,
//! `d mu_l / d z_n` is `mu_l * (1 - g_n)` on a left turn and `-mu_l * g_n` on
//! a right turn, where `g_n = sigmoid(z_n)` and `z_n = w_n·x + b_n`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy, init_params, ArchitectureSpec, EnsembleParams, Layout, Workspace};

/// Learning rates tried by [`select_learning_rate`] by default.
pub const DEFAULT_LEARNING_RATES: [f64; 3] = [0.01, 0.001, 0.0001];

/// Rows per parallel chunk when accumulating batch gradients. Partial sums are
/// added in chunk order so the result does not depend on the thread count.
const GRAD_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            batch_size: 512,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive and finite");
        }
        Ok(())
    }
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-row buffers for the forward and backward pass.
struct Scratch {
    gates: Vec<Vec<f64>>,
    flows: Vec<Vec<f64>>,
    logits: Vec<f64>,
    delta: Vec<f64>,
    leaf_grad: Vec<f64>,
    slot_grad: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ArchitectureSpec) -> Self {
        Scratch {
            gates: vec![vec![0.0; spec.node_count()]; spec.trees],
            flows: vec![vec![0.0; spec.leaf_count()]; spec.trees],
            logits: vec![0.0; spec.classes],
            delta: vec![0.0; spec.classes],
            leaf_grad: vec![0.0; spec.leaf_count()],
            slot_grad: vec![0.0; spec.node_count()],
        }
    }
}

/// Adds the cross-entropy gradient of one row to `grad`; returns its loss.
fn accumulate_row(
    layout: &Layout,
    params: &EnsembleParams,
    x: &[f64],
    label: usize,
    s: &mut Scratch,
    grad: &mut EnsembleParams,
) -> f64 {
    let spec = &params.spec;
    let (f, c) = (spec.features, spec.classes);
    s.logits.fill(0.0);
    for (m, tree) in params.trees.iter().enumerate() {
        layout.gates_into(x, tree, &mut s.gates[m]);
        layout.flow_into(&s.gates[m], &mut s.flows[m]);
        layout.accumulate_output(&s.flows[m], tree, &mut s.logits);
    }
    let loss = log_sum_exp(&s.logits) - s.logits[label];
    softmax_into(&s.logits, &mut s.delta);
    s.delta[label] -= 1.0;

    let stored = spec.stored_leaf_count();
    for (m, tree) in params.trees.iter().enumerate() {
        let (gates, flow) = (&s.gates[m], &s.flows[m]);
        let g = &mut grad.trees[m];
        for leaf in 0..spec.leaf_count() {
            if leaf < stored {
                let pi = &tree.pi[leaf * c..(leaf + 1) * c];
                let gpi = &mut g.pi[leaf * c..(leaf + 1) * c];
                let mut dot = 0.0;
                for k in 0..c {
                    gpi[k] += flow[leaf] * s.delta[k];
                    dot += pi[k] * s.delta[k];
                }
                s.leaf_grad[leaf] = dot;
            } else {
                // the empty leaf has value zero
                s.leaf_grad[leaf] = 0.0;
            }
        }
        s.slot_grad.fill(0.0);
        for (leaf, path) in layout.paths.iter().enumerate() {
            let upstream = s.leaf_grad[leaf] * flow[leaf];
            if upstream == 0.0 {
                continue;
            }
            for step in path {
                let gate = gates[step.slot];
                s.slot_grad[step.slot] += if step.right {
                    -upstream * gate
                } else {
                    upstream * (1.0 - gate)
                };
            }
        }
        for (n, &dz) in s.slot_grad.iter().enumerate() {
            g.b[n] += dz;
            for (gw, xv) in g.w[n * f..(n + 1) * f].iter_mut().zip(x) {
                *gw += dz * xv;
            }
        }
    }
    loss
}

fn add_into(acc: &mut EnsembleParams, other: &EnsembleParams) {
    for (a, b) in acc.iter_mut().zip(other.iter()) {
        *a += b;
    }
}

/// Mean cross-entropy gradient and mean loss over `rows` of `data`.
fn batch_gradients(layout: &Layout, params: &EnsembleParams, data: &Dataset, rows: &[usize]) -> (EnsembleParams, f64) {
    let spec = params.spec;
    let partials: Vec<(EnsembleParams, f64)> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = EnsembleParams::zeros(spec);
            let mut scratch = Scratch::new(&spec);
            let mut loss = 0.0;
            for &i in chunk {
                loss += accumulate_row(layout, params, data.row(i), data.labels()[i], &mut scratch, &mut grad);
            }
            (grad, loss)
        })
        .collect();
    let mut grad = EnsembleParams::zeros(spec);
    let mut loss = 0.0;
    for (g, l) in &partials {
        add_into(&mut grad, g);
        loss += l;
    }
    let scale = 1.0 / rows.len() as f64;
    grad.iter_mut().for_each(|v| *v *= scale);
    (grad, loss * scale)
}

/// Mean cross-entropy gradient over a batch of `(x, label)` pairs, shaped
/// like `params`.
pub fn gradients(params: &EnsembleParams, batch: &[(&[f64], usize)]) -> Result<EnsembleParams> {
    Ok(gradients_and_loss(params, batch)?.0)
}

/// As [`gradients`], also returning the mean loss.
pub fn gradients_and_loss(params: &EnsembleParams, batch: &[(&[f64], usize)]) -> Result<(EnsembleParams, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    let spec = params.spec;
    for (x, label) in batch {
        if x.len() != spec.features {
            return Err(Error::Shape(format!(
                "row has {} features, model expects {}",
                x.len(),
                spec.features
            )));
        }
        if *label >= spec.classes {
            return Err(Error::LabelOutOfRange {
                label: *label,
                classes: spec.classes,
            });
        }
    }
    let layout = Layout::new(&spec);
    let mut grad = EnsembleParams::zeros(spec);
    let mut scratch = Scratch::new(&spec);
    let mut loss = 0.0;
    for (x, label) in batch {
        loss += accumulate_row(&layout, params, x, *label, &mut scratch, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((grad, loss * scale))
}

/// Mean cross-entropy of `params` on `data`.
pub fn mean_loss(params: &EnsembleParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = Layout::new(&params.spec);
    let losses: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map_init(
            || (Workspace::new(&params.spec), vec![0.0; params.spec.classes]),
            |(ws, out), i| {
                crate::model::ensemble_forward_with(&layout, ws, data.row(i), params, out);
                log_sum_exp(out) - out[data.labels()[i]]
            },
        )
        .collect();
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}

/// Adam moments for every parameter, in [`EnsembleParams::iter`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &EnsembleParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = params.iter().count();
        AdamState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn with_defaults(params: &EnsembleParams) -> Self {
        AdamState::new(params, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update, in the arrangement used by PyTorch:
/// `theta -= lr / (1 - b1^t) * m / (sqrt(v) / sqrt(1 - b2^t) + eps)`.
pub fn adam_step(state: &mut AdamState, params: &mut EnsembleParams, grads: &EnsembleParams, lr: f64) -> Result<()> {
    if params.spec != grads.spec || state.first_moment.len() != params.iter().count() {
        return Err(Error::Shape(
            "Adam state, parameters and gradients differ in shape".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2_sqrt = (1.0 - state.beta2.powi(t)).sqrt();
    let step_size = lr / bc1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((theta, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *theta -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
    }
    Ok(())
}

/// Mixes a seed and a stream index into an independent 64-bit seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(stream))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: EnsembleParams,
    pub lr: f64,
    /// Training accuracy (percent) after each epoch.
    pub train_accuracy: Vec<f64>,
    /// Mean mini-batch loss over each epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.train_accuracy.last().copied().unwrap_or(0.0)
    }
}

fn check_data(spec: &ArchitectureSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.n_features() != spec.features {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            data.n_features(),
            spec.features
        )));
    }
    if let Some(&label) = data.labels().iter().find(|&&l| l >= spec.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.classes,
        });
    }
    Ok(())
}

/// Mini-batch Adam training from `init_params(spec, config.seed)`. Each epoch
/// shuffles the rows with a generator seeded from `(config.seed, epoch)`; the
/// last partial batch is kept.
pub fn train(spec: &ArchitectureSpec, data: &Dataset, config: &TrainConfig, lr: f64) -> Result<TrainOutcome> {
    config.validate()?;
    check_data(spec, data)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate {lr} must be positive")));
    }
    let mut params = init_params(spec, config.seed)?;
    let layout = Layout::new(spec);
    let mut adam = AdamState::new(&params, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut train_accuracy = Vec::with_capacity(config.epochs);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            config.seed,
            epoch as u64 + 1,
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (grad, loss) = batch_gradients(&layout, &params, data, batch);
            adam_step(&mut adam, &mut params, &grad, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        epoch_loss.push(loss_sum / batches as f64);
        train_accuracy.push(accuracy(&params, data)?);
    }
    Ok(TrainOutcome {
        params,
        lr,
        train_accuracy,
        epoch_loss,
    })
}

/// Trains once per candidate learning rate and keeps the run with the
/// highest final training accuracy; ties go to the larger learning rate.
/// Also returns every run's final accuracy, in candidate order.
pub fn select_learning_rate(
    spec: &ArchitectureSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(TrainOutcome, Vec<(f64, f64)>)> {
    if config.learning_rates.is_empty() {
        return Err(Error::InvalidInput("no learning-rate candidates".into()));
    }
    let runs: Vec<TrainOutcome> = config
        .learning_rates
        .par_iter()
        .map(|&lr| train(spec, data, config, lr))
        .collect::<Result<_>>()?;
    let summary: Vec<(f64, f64)> = runs.iter().map(|r| (r.lr, r.final_accuracy())).collect();
    let best = runs
        .into_iter()
        .reduce(|best, run| {
            let (a, b) = (run.final_accuracy(), best.final_accuracy());
            if a > b || (a == b && run.lr > best.lr) {
                run
            } else {
                best
            }
        })
        .expect("non-empty candidates");
    Ok((best, summary))
}
