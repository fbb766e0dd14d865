//! JSON artifacts: model checkpoints and alignment files.
//!
//! Checkpoint floats are written in scientific notation with 17 significant
//! digits, which round-trips every finite `f64` exactly. `w` is stored one row
//! per splitting node, `pi` one row per stored leaf.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::{validate_alignment, Alignment, InvarianceLevel, MatchMethod};
use crate::model::{ArchitectureSpec, EnsembleParams, TreeParams};

pub const FORMAT_VERSION: u32 = 1;

/// Free-form metadata attached to artifacts (seed, learning rate, config hash).
pub type Meta = BTreeMap<String, Value>;

/// `sha256:<hex>` of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Hash of the compact JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

pub fn spec_hash(spec: &ArchitectureSpec) -> Result<String> {
    config_hash(spec)
}

fn raw(v: f64) -> Result<Box<RawValue>> {
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("cannot serialize non-finite value {v}")));
    }
    Ok(RawValue::from_string(format!("{v:.16e}"))?)
}

fn raw_rows(values: &[f64], width: usize) -> Result<Vec<Vec<Box<RawValue>>>> {
    if width == 0 {
        return Ok(Vec::new());
    }
    values
        .chunks(width)
        .map(|row| row.iter().map(|&v| raw(v)).collect())
        .collect()
}

#[derive(Serialize)]
struct TreeOut {
    w: Vec<Vec<Box<RawValue>>>,
    b: Vec<Box<RawValue>>,
    pi: Vec<Vec<Box<RawValue>>>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    spec: &'a ArchitectureSpec,
    trees: Vec<TreeOut>,
    meta: &'a Meta,
}

#[derive(Deserialize)]
struct TreeIn {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    pi: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    format_version: u32,
    spec: ArchitectureSpec,
    trees: Vec<TreeIn>,
    #[serde(default)]
    meta: Meta,
}

/// A model with its metadata as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EnsembleParams,
    pub meta: Meta,
}

pub fn checkpoint_to_string(params: &EnsembleParams, meta: &Meta) -> Result<String> {
    params.validate()?;
    let spec = &params.spec;
    let trees = params
        .trees
        .iter()
        .map(|t| {
            Ok(TreeOut {
                w: raw_rows(&t.w, spec.features)?,
                b: t.b.iter().map(|&v| raw(v)).collect::<Result<_>>()?,
                pi: raw_rows(&t.pi, spec.classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = CheckpointOut {
        format_version: FORMAT_VERSION,
        spec,
        trees,
        meta,
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

fn flatten_rows(rows: Vec<Vec<f64>>, width: usize, what: &str) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape(format!("{what} rows must have length {width}")));
    }
    Ok(rows.into_iter().flatten().collect())
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let parsed: CheckpointIn = serde_json::from_str(text)?;
    if parsed.format_version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint format version {}",
            parsed.format_version
        )));
    }
    let spec = parsed.spec;
    spec.validate()?;
    let trees = parsed
        .trees
        .into_iter()
        .map(|t| {
            Ok(TreeParams {
                w: flatten_rows(t.w, spec.features, "w")?,
                b: t.b,
                pi: flatten_rows(t.pi, spec.classes, "pi")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = EnsembleParams { spec, trees };
    params.validate()?;
    Ok(Checkpoint {
        params,
        meta: parsed.meta,
    })
}

pub fn save_checkpoint(path: &Path, params: &EnsembleParams, meta: &Meta) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

/// On-disk alignment: `aligned[j] = adjust(A[p[j]], ops[q[j]])`, indices 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFile {
    pub format_version: u32,
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub method: MatchMethod,
    pub level: InvarianceLevel,
    pub spec_hash: String,
    #[serde(default)]
    pub meta: Meta,
}

impl AlignmentFile {
    pub fn new(
        spec: &ArchitectureSpec,
        alignment: &Alignment,
        method: MatchMethod,
        level: InvarianceLevel,
    ) -> Result<Self> {
        validate_alignment(spec, alignment)?;
        Ok(AlignmentFile {
            format_version: FORMAT_VERSION,
            p: alignment.p.clone(),
            q: alignment.q.clone(),
            method,
            level,
            spec_hash: spec_hash(spec)?,
            meta: Meta::new(),
        })
    }

    /// The alignment, after checking it was produced for `spec`.
    pub fn alignment_for(&self, spec: &ArchitectureSpec) -> Result<Alignment> {
        if self.spec_hash != spec_hash(spec)? {
            return Err(Error::SpecMismatch(
                "alignment was computed for a different architecture".into(),
            ));
        }
        let alignment = Alignment {
            p: self.p.clone(),
            q: self.q.clone(),
        };
        validate_alignment(spec, &alignment)?;
        Ok(alignment)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: AlignmentFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported alignment format version {}",
                file.format_version
            )));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, TreeKind};

    #[test]
    fn round_trip_is_exact() {
        let spec = ArchitectureSpec::new(TreeKind::Oblivious, 2, 3, 4, 3).unwrap();
        let mut params = init_params(&spec, 9).unwrap();
        params.trees[0].w[0] = 0.1 + 0.2;
        params.trees[1].b[1] = 5e-324;
        params.trees[2].pi[0] = -1.7976931348623157e308;
        let mut meta = Meta::new();
        meta.insert("seed".into(), Value::from(9));
        let text = checkpoint_to_string(&params, &meta).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.meta, meta);
        assert_eq!(checkpoint_to_string(&back.params, &back.meta).unwrap(), text);
    }

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(raw(0.5).unwrap().get(), "5.0000000000000000e-1");
        assert!(raw(f64::NAN).is_err());
    }

    #[test]
    fn rejects_bad_checkpoints() {
        let spec = ArchitectureSpec::new(TreeKind::DecisionList, 1, 1, 2, 2).unwrap();
        let params = init_params(&spec, 1).unwrap();
        let text = checkpoint_to_string(&params, &Meta::new()).unwrap();
        let v2 = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(checkpoint_from_str(&v2).is_err());
        let mut value: Value = serde_json::from_str(&text).unwrap();
        value["trees"][0]["w"][0] = Value::from(vec![1.0]);
        assert!(checkpoint_from_str(&value.to_string()).is_err());
    }

    #[test]
    fn alignment_file_checks_spec() {
        let spec = ArchitectureSpec::new(TreeKind::NonOblivious, 1, 2, 2, 2).unwrap();
        let other = ArchitectureSpec {
            trees: 2,
            depth: 2,
            ..spec
        };
        let al = Alignment {
            p: vec![1, 0],
            q: vec![1, 0],
        };
        let file = AlignmentFile::new(&spec, &al, MatchMethod::Wm, InvarianceLevel::Full).unwrap();
        assert_eq!(file.alignment_for(&spec).unwrap(), al);
        assert!(file.alignment_for(&other).is_err());
        let bad = Alignment {
            p: vec![0, 0],
            q: vec![0, 0],
        };
        assert!(AlignmentFile::new(&spec, &bad, MatchMethod::Wm, InvarianceLevel::Full).is_err());
    }
}
