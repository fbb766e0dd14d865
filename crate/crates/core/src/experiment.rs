//! Experiment pipelines: train seed pairs, align them and report barriers.
//!
//! Every output is a pure function of the [`ExperimentConfig`]; seed pairs
//! run in parallel but results are collected in configuration order and all
//! reductions have a fixed order, so reports are byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{config_hash, save_checkpoint, AlignmentFile, Meta, FORMAT_VERSION};
use crate::data::{
    class_ratio_split, load_csv_with_classes, subsample_protocol, synth_gaussian_blobs, synth_xor, Dataset,
    QuantileTransform,
};
use crate::error::{Error, Result};
use crate::evaluation::{barrier, barrier_suite, lambda_grid, BarrierCurve, Split, SuiteEntry, DEFAULT_LAMBDA_STEPS};
use crate::matching::{
    align, apply_alignment, sample_inputs, InvarianceLevel, MatchMethod, DEFAULT_ACTIVATION_SAMPLES,
};
use crate::model::{accuracy, ArchitectureSpec, EnsembleParams, TreeKind};
use crate::training::{select_learning_rate, stream_seed, TrainConfig, DEFAULT_LEARNING_RATES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    },
    Xor {
        samples: usize,
        features: usize,
        label_noise: f64,
        seed: u64,
    },
    /// Numeric CSV with a trailing `label` column.
    Csv { path: PathBuf, classes: Option<usize> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs {
            samples: 4000,
            features: 8,
            classes: 3,
            separation: 3.0,
            seed: 0,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Blobs {
                samples,
                features,
                classes,
                separation,
                seed,
            } => synth_gaussian_blobs(*samples, *features, *classes, *separation, *seed),
            DataSource::Xor {
                samples,
                features,
                label_noise,
                seed,
            } => synth_xor(*samples, *features, *label_noise, *seed),
            DataSource::Csv { path, classes } => load_csv_with_classes(path, *classes),
        }
    }
}

/// Experiment description; every field has a default and may be given in a
/// JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Seed of the train/test split.
    pub split_seed: u64,
    pub arch: TreeKind,
    pub depth: usize,
    pub trees: usize,
    pub matching: MatchMethod,
    pub invariances: Vec<InvarianceLevel>,
    pub lambda_steps: usize,
    pub seeds_a: Vec<u64>,
    pub seeds_b: Vec<u64>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation_samples: usize,
    /// Train model `A` and `B` on the two halves of the class-ratio split.
    pub split_data: bool,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            split_seed: 0,
            arch: TreeKind::Oblivious,
            depth: 2,
            trees: 64,
            matching: MatchMethod::Wm,
            invariances: InvarianceLevel::ALL.to_vec(),
            lambda_steps: DEFAULT_LAMBDA_STEPS,
            seeds_a: vec![1, 3, 5, 7, 9],
            seeds_b: vec![2, 4, 6, 8, 10],
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            epochs: 20,
            batch_size: 512,
            activation_samples: DEFAULT_ACTIVATION_SAMPLES,
            split_data: false,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    /// Full-size protocol: 256 trees, 50 epochs.
    pub fn large() -> Self {
        ExperimentConfig {
            trees: 256,
            epochs: 50,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::default()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.seeds_a.len() != self.seeds_b.len() {
            return bad(format!(
                "seed lists differ in length ({} vs {})",
                self.seeds_a.len(),
                self.seeds_b.len()
            ));
        }
        if self.seeds_a.is_empty() {
            return bad("at least one seed pair is required".into());
        }
        if self.lambda_steps == 0 {
            return bad("lambda_steps must be at least 1".into());
        }
        if self.invariances.is_empty() {
            return bad("at least one invariance level is required".into());
        }
        if self.matching == MatchMethod::Am && self.activation_samples == 0 {
            return bad("activation matching needs at least one sample".into());
        }
        self.train_config(0).validate()?;
        ArchitectureSpec::new(self.arch, self.depth, self.trees, 1, 1).map(|_| ())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rates: self.learning_rates.clone(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn spec(&self, data: &Dataset) -> Result<ArchitectureSpec> {
        ArchitectureSpec::new(self.arch, self.depth, self.trees, data.n_features(), data.classes())
    }

    pub fn grid(&self) -> Vec<f64> {
        lambda_grid(self.lambda_steps)
    }

    pub fn seed_pairs(&self) -> Vec<(u64, u64)> {
        self.seeds_a.iter().copied().zip(self.seeds_b.iter().copied()).collect()
    }

    /// Runs `f` on a pool with `jobs` threads (all cores when 0).
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Quantile-normalized train and test splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub transform: QuantileTransform,
    pub source: String,
}

impl PreparedData {
    /// Training rows for model `A` (`first`) or `B`: the whole train split, or
    /// one side of the class-ratio split when `split_data` is set.
    pub fn training_rows(&self, config: &ExperimentConfig, first: bool) -> Result<Dataset> {
        if !config.split_data {
            return Ok(self.train.clone());
        }
        let (one, two) = class_ratio_split(&self.train, config.split_seed)?;
        Ok(if first { one } else { two })
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let full = config.data.load()?;
    let (train, test) = subsample_protocol(&full, config.split_seed)?;
    let transform = QuantileTransform::fit(&train);
    Ok(PreparedData {
        train: transform.apply(&train)?,
        test: transform.apply(&test)?,
        transform,
        source: full.provenance,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub seed: u64,
    pub params: EnsembleParams,
    pub lr: f64,
    /// `(lr, final train accuracy)` for every candidate.
    pub lr_scores: Vec<(f64, f64)>,
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
}

pub fn train_model(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainedModel> {
    let spec = config.spec(data)?;
    let (outcome, lr_scores) = select_learning_rate(&spec, data, &config.train_config(seed))?;
    Ok(TrainedModel {
        seed,
        lr: outcome.lr,
        params: outcome.params,
        lr_scores,
        epoch_loss: outcome.epoch_loss,
        train_accuracy: outcome.train_accuracy,
    })
}

/// Models `A` (one per `seeds_a`) and `B` (one per `seeds_b`).
pub fn train_models(config: &ExperimentConfig, data: &PreparedData) -> Result<(Vec<TrainedModel>, Vec<TrainedModel>)> {
    let (rows_a, rows_b) = (data.training_rows(config, true)?, data.training_rows(config, false)?);
    let jobs: Vec<(u64, &Dataset)> = config
        .seeds_a
        .iter()
        .map(|&s| (s, &rows_a))
        .chain(config.seeds_b.iter().map(|&s| (s, &rows_b)))
        .collect();
    let mut models = jobs
        .par_iter()
        .map(|&(seed, rows)| train_model(config, rows, seed))
        .collect::<Result<Vec<_>>>()?;
    let b = models.split_off(config.seeds_a.len());
    Ok((models, b))
}

/// Activation-matching inputs for a seed pair, drawn from the train split.
pub fn pair_samples(config: &ExperimentConfig, data: &PreparedData, seed_a: u64, seed_b: u64) -> Vec<Vec<f64>> {
    if config.matching == MatchMethod::Am {
        sample_inputs(&data.train, config.activation_samples, stream_seed(seed_a, seed_b))
    } else {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
pub struct PairResult {
    pub seed_a: u64,
    pub seed_b: u64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub entries: Vec<SuiteEntry>,
}

#[derive(Clone, Debug)]
pub struct MatrixResult {
    pub spec: ArchitectureSpec,
    pub pairs: Vec<PairResult>,
}

/// Trains every seed, aligns each pair at every configured level and
/// evaluates both splits.
pub fn run_matrix(config: &ExperimentConfig, data: &PreparedData) -> Result<MatrixResult> {
    config.validate()?;
    let (models_a, models_b) = train_models(config, data)?;
    let spec = config.spec(&data.train)?;
    let grid = config.grid();
    let pairs = models_a
        .par_iter()
        .zip(models_b.par_iter())
        .map(|(a, b)| {
            let samples = pair_samples(config, data, a.seed, b.seed);
            let entries = barrier_suite(
                &a.params,
                &b.params,
                &data.train,
                &data.test,
                &config.invariances,
                config.matching,
                &samples,
                &grid,
            )?;
            Ok(PairResult {
                seed_a: a.seed,
                seed_b: b.seed,
                lr_a: a.lr,
                lr_b: b.lr,
                entries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixResult { spec, pairs })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Column names of curve reports, after the comment line.
pub const CURVE_COLUMNS: [&str; 7] = ["method", "matching", "split", "lambda", "accuracy", "seed_a", "seed_b"];

fn comment_line(kind: &str, hash: &str) -> String {
    format!("# softtree {kind} format_version={FORMAT_VERSION} config_hash={hash}\n")
}

/// One curve row per (pair, level, split, lambda). The first line is a
/// `#` comment carrying the format version and config hash.
pub fn curves_csv(
    hash: &str,
    method: MatchMethod,
    rows: &[(u64, u64, InvarianceLevel, &BarrierCurve, Split)],
) -> String {
    let mut out = comment_line("curves", hash);
    out.push_str(&CURVE_COLUMNS.join(","));
    out.push('\n');
    for (seed_a, seed_b, level, curve, split) in rows {
        for (l, v) in curve.lambdas.iter().zip(&curve.values) {
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{},{}",
                method.name(),
                level.name(),
                split.name(),
                l,
                v,
                seed_a,
                seed_b
            );
        }
    }
    out
}

pub fn matrix_curves_csv(hash: &str, method: MatchMethod, result: &MatrixResult) -> String {
    let mut rows = Vec::new();
    for pair in &result.pairs {
        for entry in &pair.entries {
            for split in [Split::Train, Split::Test] {
                rows.push((pair.seed_a, pair.seed_b, entry.level, entry.curve(split), split));
            }
        }
    }
    curves_csv(hash, method, &rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: MatchMethod,
    pub matching: InvarianceLevel,
    pub split: Split,
    /// Barrier per seed pair, in seed-pair order.
    pub barriers: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub seed_a: u64,
    pub seed_b: u64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub accuracy_a: [f64; 2],
    pub accuracy_b: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub spec: ArchitectureSpec,
    pub data_source: String,
    pub pairs: Vec<PairInfo>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, matching: InvarianceLevel, split: Split) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.matching == matching && r.split == split)
    }
}

pub fn summarize(config: &ExperimentConfig, data: &PreparedData, result: &MatrixResult) -> Result<Summary> {
    let mut rows = Vec::new();
    for (k, &level) in config.invariances.iter().enumerate() {
        for split in [Split::Train, Split::Test] {
            let barriers: Vec<f64> = result.pairs.iter().map(|p| p.entries[k].curve(split).barrier).collect();
            let (mean, std) = mean_std(&barriers);
            rows.push(SummaryRow {
                method: config.matching,
                matching: level,
                split,
                barriers,
                mean,
                std,
            });
        }
    }
    let pairs = result
        .pairs
        .iter()
        .map(|p| {
            let e = &p.entries[0];
            PairInfo {
                seed_a: p.seed_a,
                seed_b: p.seed_b,
                lr_a: p.lr_a,
                lr_b: p.lr_b,
                accuracy_a: [e.train.endpoint_a, e.test.endpoint_a],
                accuracy_b: [e.train.endpoint_b, e.test.endpoint_b],
            }
        })
        .collect();
    Ok(Summary {
        format_version: FORMAT_VERSION,
        config_hash: config.hash()?,
        config: config.clone(),
        spec: result.spec,
        data_source: data.source.clone(),
        pairs,
        rows,
    })
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Runs the matrix and writes `curves.csv` and `summary.json` into `out`.
pub fn write_matrix_outputs(config: &ExperimentConfig, out: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    std::fs::create_dir_all(out)?;
    let data = prepare_data(config)?;
    let result = config.install(|| run_matrix(config, &data))??;
    let summary = summarize(config, &data, &result)?;
    let hash = config.hash()?;
    let files = vec![
        write(
            &out.join("curves.csv"),
            &matrix_curves_csv(&hash, config.matching, &result),
        )?,
        write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?,
    ];
    Ok((summary, files))
}

fn model_file_name(config: &ExperimentConfig, first: bool, seed: u64) -> String {
    if config.split_data {
        format!("model_split{}_seed{seed}.json", if first { 1 } else { 2 })
    } else {
        format!("model_seed{seed}.json")
    }
}

fn model_meta(config: &ExperimentConfig, data: &PreparedData, model: &TrainedModel, first: bool) -> Result<Meta> {
    let mut meta = Meta::new();
    meta.insert("config_hash".into(), Value::from(config.hash()?));
    meta.insert("seed".into(), Value::from(model.seed));
    meta.insert("lr".into(), Value::from(model.lr));
    meta.insert("data_source".into(), Value::from(data.source.clone()));
    if config.split_data {
        meta.insert("split".into(), Value::from(if first { 1 } else { 2 }));
    }
    meta.insert("lr_scores".into(), serde_json::to_value(&model.lr_scores)?);
    Ok(meta)
}

/// Trains every configured seed and writes one checkpoint per (seed, split),
/// `history.csv` (per-epoch loss and accuracy of each selected run) and
/// `lr_selection.csv`.
pub fn write_train_outputs(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let data = prepare_data(config)?;
    let (models_a, models_b) = config.install(|| train_models(config, &data))??;
    let hash = config.hash()?;
    let mut history = comment_line("history", &hash);
    history.push_str("seed,split,lr,epoch,loss,train_accuracy\n");
    let mut selection = comment_line("lr_selection", &hash);
    selection.push_str("seed,split,lr,train_accuracy,selected\n");
    let mut files = Vec::new();
    let mut written = std::collections::BTreeSet::new();
    for (first, models) in [(true, &models_a), (false, &models_b)] {
        let split = if config.split_data {
            if first {
                "1"
            } else {
                "2"
            }
        } else {
            "full"
        };
        for model in models {
            let name = model_file_name(config, first, model.seed);
            if !written.insert(name.clone()) {
                continue;
            }
            let path = out.join(name);
            save_checkpoint(&path, &model.params, &model_meta(config, &data, model, first)?)?;
            files.push(path);
            for (epoch, (loss, acc)) in model.epoch_loss.iter().zip(&model.train_accuracy).enumerate() {
                let _ = writeln!(
                    history,
                    "{},{split},{:?},{},{:?},{:?}",
                    model.seed,
                    model.lr,
                    epoch + 1,
                    loss,
                    acc
                );
            }
            for &(lr, acc) in &model.lr_scores {
                let _ = writeln!(
                    selection,
                    "{},{split},{:?},{:?},{}",
                    model.seed,
                    lr,
                    acc,
                    lr == model.lr
                );
            }
        }
    }
    files.push(write(&out.join("history.csv"), &history)?);
    files.push(write(&out.join("lr_selection.csv"), &selection)?);
    Ok(files)
}

/// Aligns checkpoint `a` to `b` with the configured method at `level`.
pub fn match_models(
    config: &ExperimentConfig,
    data: Option<&PreparedData>,
    a: &EnsembleParams,
    b: &EnsembleParams,
    level: InvarianceLevel,
    sample_seed: u64,
) -> Result<AlignmentFile> {
    let samples = match (config.matching, data) {
        (MatchMethod::Am, Some(d)) => sample_inputs(&d.train, config.activation_samples, sample_seed),
        (MatchMethod::Am, None) => {
            return Err(Error::InvalidInput("activation matching needs a dataset".into()));
        }
        (MatchMethod::Wm, _) => Vec::new(),
    };
    let outcome = align(a, b, config.matching, level, &samples)?;
    let mut file = AlignmentFile::new(&a.spec, &outcome.alignment, config.matching, level)?;
    file.meta.insert("objective".into(), Value::from(outcome.objective));
    file.meta.insert("config_hash".into(), Value::from(config.hash()?));
    Ok(file)
}

/// Curves on both splits for `a` aligned by `alignment` against `b`.
pub fn barrier_for_alignment(
    config: &ExperimentConfig,
    data: &PreparedData,
    a: &EnsembleParams,
    b: &EnsembleParams,
    alignment: &AlignmentFile,
) -> Result<(BarrierCurve, BarrierCurve)> {
    if a.spec != b.spec {
        return Err(Error::SpecMismatch("checkpoints have different architectures".into()));
    }
    let aligned = apply_alignment(a, &alignment.alignment_for(&a.spec)?)?;
    let grid = config.grid();
    Ok((
        barrier(&aligned, b, &data.train, &grid)?,
        barrier(&aligned, b, &data.test, &grid)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePair {
    pub seed_a: u64,
    pub seed_b: u64,
    /// Test-set curve of the full-invariance path from `B` to aligned `A`.
    pub curve: BarrierCurve,
    /// Best accuracy at an interior grid point and its lambda.
    pub best_interior: (f64, f64),
    /// Test accuracy of a model trained on the whole train split with `seed_a`.
    pub reference_accuracy: f64,
}

impl MergePair {
    /// Whether some interior point beats both endpoints.
    pub fn interior_wins(&self) -> bool {
        self.best_interior.1 > self.curve.endpoint_a.max(self.curve.endpoint_b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub data_source: String,
    pub pairs: Vec<MergePair>,
    pub interior_wins: usize,
}

/// Trains `A` on the 80/20 and `B` on the 20/80 class-ratio halves of the
/// train split, aligns them with every invariance and evaluates the path on
/// the test split.
pub fn run_merge_split(config: &ExperimentConfig, data: &PreparedData) -> Result<MergeSummary> {
    let mut config = config.clone();
    config.split_data = true;
    config.validate()?;
    let (models_a, models_b) = train_models(&config, data)?;
    let grid = config.grid();
    let pairs = models_a
        .par_iter()
        .zip(models_b.par_iter())
        .map(|(a, b)| {
            let samples = pair_samples(&config, data, a.seed, b.seed);
            let outcome = align(&a.params, &b.params, config.matching, InvarianceLevel::Full, &samples)?;
            let aligned = apply_alignment(&a.params, &outcome.alignment)?;
            let curve = barrier(&aligned, &b.params, &data.test, &grid)?;
            let best_interior = curve.lambdas[1..curve.lambdas.len() - 1]
                .iter()
                .zip(&curve.values[1..curve.values.len() - 1])
                .fold(
                    (f64::NAN, f64::NEG_INFINITY),
                    |best, (&l, &v)| if v > best.1 { (l, v) } else { best },
                );
            let reference = train_model(&config, &data.train, a.seed)?;
            Ok(MergePair {
                seed_a: a.seed,
                seed_b: b.seed,
                reference_accuracy: accuracy(&reference.params, &data.test)?,
                curve,
                best_interior,
            })
        })
        .collect::<Result<Vec<MergePair>>>()?;
    Ok(MergeSummary {
        format_version: FORMAT_VERSION,
        config_hash: config.hash()?,
        interior_wins: pairs.iter().filter(|p| p.interior_wins()).count(),
        config,
        data_source: data.source.clone(),
        pairs,
    })
}

pub fn write_merge_outputs(config: &ExperimentConfig, out: &Path) -> Result<(MergeSummary, Vec<PathBuf>)> {
    std::fs::create_dir_all(out)?;
    let data = prepare_data(config)?;
    let summary = config.install(|| run_merge_split(config, &data))??;
    let rows: Vec<_> = summary
        .pairs
        .iter()
        .map(|p| (p.seed_a, p.seed_b, InvarianceLevel::Full, &p.curve, Split::Test))
        .collect();
    let csv = curves_csv(&summary.config_hash, summary.config.matching, &rows);
    let files = vec![
        write(&out.join("merge_curves.csv"), &csv)?,
        write(
            &out.join("merge_summary.json"),
            &serde_json::to_string_pretty(&summary)?,
        )?,
    ];
    Ok((summary, files))
}
