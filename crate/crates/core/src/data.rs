//! Tabular datasets: CSV input, quantile preprocessing, split protocols and
//! synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Dense row-major feature matrix with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    classes: usize,
    pub feature_names: Vec<String>,
    /// File hash or generator description.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        classes: usize,
        feature_names: Vec<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if feature_names.len() != n_features {
            return Err(Error::Shape(format!(
                "{} feature names for {} features",
                feature_names.len(),
                n_features
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if features.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("features contain NaN".into()));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            classes,
            feature_names,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features)
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            features,
            self.n_features,
            labels,
            self.classes,
            self.feature_names.clone(),
            self.provenance.clone(),
        )
    }

    fn column(&self, f: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[f])
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Reads a CSV with a header row whose last column is `label`.
/// The class count is `max label + 1` unless `classes` overrides it.
pub fn load_csv_with_classes(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path)?;
    let csv_err = |msg: String| Error::Csv {
        path: shown.clone(),
        msg,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.last().map(String::as_str) != Some("label") {
        return Err(csv_err(
            "missing header: the last column must be named \"label\"".into(),
        ));
    }
    let n_features = header.len() - 1;
    if n_features == 0 {
        return Err(csv_err("no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let line = i + 2;
        for field in record.iter().take(n_features) {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(format!("line {line}: non-numeric feature {field:?}")))?;
            if v.is_nan() {
                return Err(csv_err(format!("line {line}: NaN feature")));
            }
            features.push(v);
        }
        let raw = &record[n_features];
        labels.push(
            parse_label(raw)
                .ok_or_else(|| csv_err(format!("line {line}: label {raw:?} is not a non-negative integer")))?,
        );
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inferred = labels.iter().max().map_or(0, |m| m + 1);
    let classes = match classes {
        Some(c) if c < inferred => {
            return Err(Error::LabelOutOfRange {
                label: inferred - 1,
                classes: c,
            })
        }
        Some(c) => c,
        None => inferred,
    };
    let provenance = format!("sha256:{}", hex::encode(Sha256::digest(&bytes)));
    Dataset::new(
        features,
        n_features,
        labels,
        classes,
        header[..n_features].to_vec(),
        provenance,
    )
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with_classes(path, None)
}

fn parse_label(raw: &str) -> Option<usize> {
    if let Ok(v) = raw.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = raw.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64).then_some(v as usize)
}

/// Writes `data` in the format read by [`load_csv`]. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut header = data.feature_names.clone();
    header.push("label".into());
    let map = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    writer.write_record(&header).map_err(map)?;
    for (row, label) in data.rows().zip(data.labels()) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        record.push(label.to_string());
        writer.write_record(&record).map_err(map)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-feature empirical-CDF knot: a distinct training value and its
/// plotting position (mid-rank / (n + 1)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub value: f64,
    pub position: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureQuantiles {
    pub knots: Vec<Knot>,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
    pub std: f64,
}

/// Maps each feature through its training empirical CDF onto the standard
/// normal, then standardizes with training mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileTransform {
    pub features: Vec<FeatureQuantiles>,
}

fn standard_normal() -> Normal {
    Normal::standard()
}

impl FeatureQuantiles {
    fn fit(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let denom = (n + 1) as f64;
        let mut knots = Vec::new();
        let mut lo = 0;
        while lo < n {
            let mut hi = lo + 1;
            while hi < n && values[hi] == values[lo] {
                hi += 1;
            }
            // ranks lo+1 ..= hi, averaged
            knots.push(Knot {
                value: values[lo],
                position: (lo + hi + 1) as f64 / 2.0 / denom,
            });
            lo = hi;
        }
        let mut fq = FeatureQuantiles {
            knots,
            lower: 1.0 / denom,
            upper: n as f64 / denom,
            mean: 0.0,
            std: 1.0,
        };
        let gauss: Vec<f64> = values.iter().map(|&v| fq.gaussianize(v)).collect();
        let mean = gauss.iter().sum::<f64>() / n as f64;
        let var = gauss.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n as f64;
        fq.mean = mean;
        fq.std = var.sqrt();
        fq
    }

    fn position(&self, v: f64) -> f64 {
        let k = &self.knots;
        let idx = k.partition_point(|knot| knot.value < v);
        let p = if idx < k.len() && k[idx].value == v {
            k[idx].position
        } else if idx == 0 {
            self.lower
        } else if idx == k.len() {
            self.upper
        } else {
            let (a, b) = (&k[idx - 1], &k[idx]);
            let t = (v - a.value) / (b.value - a.value);
            a.position + t * (b.position - a.position)
        };
        p.clamp(self.lower, self.upper)
    }

    fn gaussianize(&self, v: f64) -> f64 {
        standard_normal().inverse_cdf(self.position(v))
    }

    pub fn transform(&self, v: f64) -> f64 {
        if self.std == 0.0 || self.knots.len() < 2 {
            return 0.0;
        }
        (self.gaussianize(v) - self.mean) / self.std
    }
}

impl QuantileTransform {
    /// Fits on the rows of `train` only.
    pub fn fit(train: &Dataset) -> Self {
        QuantileTransform {
            features: (0..train.n_features())
                .map(|f| FeatureQuantiles::fit(train.column(f).collect()))
                .collect(),
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.features.len() {
            return Err(Error::Shape(format!(
                "transform fit on {} features, data has {}",
                self.features.len(),
                data.n_features()
            )));
        }
        let features = data
            .rows()
            .flat_map(|row| row.iter().zip(&self.features).map(|(&v, fq)| fq.transform(v)))
            .collect();
        Dataset::new(
            features,
            data.n_features(),
            data.labels().to_vec(),
            data.classes(),
            data.feature_names.clone(),
            data.provenance.clone(),
        )
    }
}

pub fn fit_quantile_transform(train: &Dataset) -> QuantileTransform {
    QuantileTransform::fit(train)
}

/// Sidecar recorded next to a preprocessed CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessSidecar {
    pub format_version: u32,
    pub source: String,
    pub split_seed: u64,
    pub transform: QuantileTransform,
}

/// Full sample size per split when the source is large enough.
pub const SUBSAMPLE_SIZE: usize = 10_000;

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Draws 10,000 train and 10,000 test rows when at least 20,000 rows exist,
/// otherwise splits the rows randomly in halves. Row order inside each split
/// follows the source.
pub fn subsample_protocol(full: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = full.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 rows to split, got {n}")));
    }
    let idx = shuffled_indices(n, seed);
    let (mut train, mut test) = if n >= 2 * SUBSAMPLE_SIZE {
        (
            idx[..SUBSAMPLE_SIZE].to_vec(),
            idx[SUBSAMPLE_SIZE..2 * SUBSAMPLE_SIZE].to_vec(),
        )
    } else {
        let half = n / 2;
        (idx[..half].to_vec(), idx[half..].to_vec())
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok((full.subset(&train)?, full.subset(&test)?))
}

/// Index sets of the class-ratio split: the first takes 80% of the negatives
/// (label 0) and 20% of the positives (label 1), the second the complement.
pub fn class_ratio_split_indices(data: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.classes() > 2 || data.labels().iter().any(|&l| l > 1) {
        return Err(Error::InvalidInput(format!(
            "class-ratio split needs binary labels, found {} classes",
            data.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (class, fraction) in [(0usize, 0.8), (1usize, 0.2)] {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// Splits binary-labelled `data` into an 80/20 and a 20/80 negative/positive
/// mix. Depends only on the data and `seed`.
pub fn class_ratio_split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = class_ratio_split_indices(data, seed)?;
    Ok((data.subset(&a)?, data.subset(&b)?))
}

/// Balanced Gaussian blobs with unit variance. Class centres sit at
/// `separation / sqrt(2)` along distinct axes when `C <= F` (pairwise distance
/// `separation`), and along random directions otherwise.
pub fn synth_gaussian_blobs(n: usize, features: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || features == 0 || n < classes {
        return Err(Error::InvalidInput(format!(
            "blobs need n >= C >= 1 and F >= 1 (n={n}, F={features}, C={classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= features {
                (0..features).map(|f| if f == c { radius } else { 0.0 }).collect()
            } else {
                let dir: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|v| v * radius / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut values = Vec::with_capacity(n * features);
    for &label in &labels {
        for &c in &centers[label] {
            let noise: f64 = rng.sample(StandardNormal);
            values.push(c + noise);
        }
    }
    Dataset::new(
        values,
        features,
        labels,
        classes,
        default_names(features),
        format!("synth:blobs(n={n},F={features},C={classes},sep={separation},seed={seed})"),
    )
}

/// Binary XOR task: standard normal features, label 1 exactly when the first
/// two features have opposite signs; each label is flipped with probability
/// `label_noise`. Remaining features are pure noise.
pub fn synth_xor(n: usize, features: usize, label_noise: f64, seed: u64) -> Result<Dataset> {
    if features < 2 || n < 2 {
        return Err(Error::InvalidInput(format!(
            "xor needs F >= 2 and n >= 2 (n={n}, F={features})"
        )));
    }
    if !(0.0..=0.5).contains(&label_noise) {
        return Err(Error::InvalidInput(format!(
            "label noise {label_noise} outside [0, 0.5]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
        let clean = usize::from((row[0] > 0.0) != (row[1] > 0.0));
        let flip = rng.random::<f64>() < label_noise;
        labels.push(if flip { 1 - clean } else { clean });
        values.extend(row);
    }
    Dataset::new(
        values,
        features,
        labels,
        2,
        default_names(features),
        format!("synth:xor(n={n},F={features},noise={label_noise},seed={seed})"),
    )
}
