//! Linear interpolation between two ensembles and the barrier along it.
//!
//! `interpolate(A, B, lambda) = lambda * A + (1 - lambda) * B`, so `lambda = 1`
//! is model `A` and `lambda = 0` is model `B`. For a higher-is-better metric
//! the barrier is `max_lambda [lambda C(A) + (1 - lambda) C(B) - C(lambda)]`
//! over the grid; for a loss the subtraction is reversed.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::{align, apply_alignment, Alignment, InvarianceLevel, MatchMethod};
use crate::model::{accuracy, EnsembleParams};
use crate::training::mean_loss;

/// Number of grid intervals used by default (`lambda = k / 24`).
pub const DEFAULT_LAMBDA_STEPS: usize = 24;

/// `{0, 1/steps, ..., 1}`.
pub fn lambda_grid(steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

/// Element-wise `lambda * A + (1 - lambda) * B`.
pub fn interpolate(a: &EnsembleParams, b: &EnsembleParams, lambda: f64) -> Result<EnsembleParams> {
    if a.spec != b.spec {
        return Err(Error::SpecMismatch(format!("{:?} vs {:?}", a.spec, b.spec)));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut out = a.clone();
    for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(b.iter())) {
        *o = lambda * x + (1.0 - lambda) * y;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Accuracy in percent, higher is better.
    Accuracy,
    /// Mean cross-entropy, lower is better.
    Loss,
}

impl Metric {
    pub fn evaluate(self, params: &EnsembleParams, data: &Dataset) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(params, data),
            Metric::Loss => mean_loss(params, data),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierCurve {
    pub metric: Metric,
    pub lambdas: Vec<f64>,
    /// Metric of the interpolated model at each grid point.
    pub values: Vec<f64>,
    /// Metric of model `A` (`lambda = 1`).
    pub endpoint_a: f64,
    /// Metric of model `B` (`lambda = 0`).
    pub endpoint_b: f64,
    pub barrier: f64,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let ascending = grid.windows(2).all(|w| w[0] < w[1]);
    let inside = grid.iter().all(|l| (0.0..=1.0).contains(l));
    let endpoints = grid.first() == Some(&0.0) && grid.last() == Some(&1.0);
    if grid.is_empty() || !ascending || !inside || !endpoints {
        return Err(Error::InvalidInput(
            "lambda grid must ascend within [0, 1] and contain both 0 and 1".into(),
        ));
    }
    Ok(())
}

/// Barrier value for a curve of metric values (shared with reports).
pub fn barrier_from_values(metric: Metric, lambdas: &[f64], values: &[f64], endpoint_a: f64, endpoint_b: f64) -> f64 {
    lambdas
        .iter()
        .zip(values)
        .map(|(&l, &v)| {
            // exact at lambda = 0 and when the endpoints agree
            let linear = endpoint_b + l * (endpoint_a - endpoint_b);
            match metric {
                Metric::Accuracy => linear - v,
                Metric::Loss => v - linear,
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Accuracy barrier of the path from `b` (`lambda = 0`) to `a_aligned`.
pub fn barrier(a_aligned: &EnsembleParams, b: &EnsembleParams, data: &Dataset, grid: &[f64]) -> Result<BarrierCurve> {
    barrier_with_metric(a_aligned, b, data, grid, Metric::Accuracy)
}

pub fn barrier_with_metric(
    a_aligned: &EnsembleParams,
    b: &EnsembleParams,
    data: &Dataset,
    grid: &[f64],
    metric: Metric,
) -> Result<BarrierCurve> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_grid(grid)?;
    let endpoint_a = metric.evaluate(a_aligned, data)?;
    let endpoint_b = metric.evaluate(b, data)?;
    let values = grid
        .iter()
        .map(|&l| metric.evaluate(&interpolate(a_aligned, b, l)?, data))
        .collect::<Result<Vec<_>>>()?;
    let barrier = barrier_from_values(metric, grid, &values, endpoint_a, endpoint_b);
    Ok(BarrierCurve {
        metric,
        lambdas: grid.to_vec(),
        values,
        endpoint_a,
        endpoint_b,
        barrier,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One alignment level evaluated on both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub level: InvarianceLevel,
    pub method: MatchMethod,
    pub alignment: Alignment,
    /// Objective of the assignment solved by the matcher.
    pub objective: f64,
    pub train: BarrierCurve,
    pub test: BarrierCurve,
}

impl SuiteEntry {
    pub fn curve(&self, split: Split) -> &BarrierCurve {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Aligns `a` to `b` at each requested level and evaluates the accuracy
/// barrier on `train` and `test`.
#[allow(clippy::too_many_arguments)]
pub fn barrier_suite(
    a: &EnsembleParams,
    b: &EnsembleParams,
    train: &Dataset,
    test: &Dataset,
    levels: &[InvarianceLevel],
    method: MatchMethod,
    samples: &[Vec<f64>],
    grid: &[f64],
) -> Result<Vec<SuiteEntry>> {
    levels
        .iter()
        .map(|&level| {
            let outcome = align(a, b, method, level, samples)?;
            let aligned = apply_alignment(a, &outcome.alignment)?;
            Ok(SuiteEntry {
                level,
                method,
                objective: outcome.objective,
                train: barrier(&aligned, b, train, grid)?,
                test: barrier(&aligned, b, test, grid)?,
                alignment: outcome.alignment,
            })
        })
        .collect()
}
