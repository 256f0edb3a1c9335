//! On-disk formats: the `ZTF1` dense tensor file and the JSON zoo manifest.
//!
//! Tensor layout (all little-endian):
//!
//! ```text
//! b"ZTF1" | rank: u32 | dims: rank x u32 | payload: product(dims) x f32
//! ```
//!
//! Tensors are stored as 32-bit floats and widened to `f64` on load; every
//! entropy and kernel sum downstream accumulates in 64 bits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ZTF1";
pub const MANIFEST_VERSION: u32 = 1;
const MAX_RANK: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"ZTF1\"")]
    BadMagic([u8; 4]),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("zero-sized dimension at axis {0}")]
    ZeroDim(usize),
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> std::result::Result<Self, FormatError> {
        let t = TensorF32 { dims, data };
        t.validate()?;
        Ok(t)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> std::result::Result<(), FormatError> {
        if self.dims.len() > MAX_RANK as usize {
            return Err(FormatError::DimOverflow(format!("rank {} > {MAX_RANK}", self.dims.len())));
        }
        if let Some(axis) = self.dims.iter().position(|&d| d == 0) {
            return Err(FormatError::ZeroDim(axis));
        }
        for &d in &self.dims {
            if u32::try_from(d).is_err() {
                return Err(FormatError::DimOverflow(format!("dimension {d} exceeds u32")));
            }
        }
        let numel = checked_numel(&self.dims)?;
        if numel != self.data.len() {
            return Err(FormatError::LengthMismatch {
                expected: numel * 4,
                found: self.data.len() * 4,
            });
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(i));
        }
        Ok(())
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (r, c) = m.dim();
        TensorF32 {
            dims: vec![r, c],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        TensorF32 {
            dims: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> std::result::Result<Array2<f64>, String> {
        if self.dims.len() != 2 {
            return Err(format!("expected rank 2, found rank {}", self.dims.len()));
        }
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Array2::from_shape_vec((self.dims[0], self.dims[1]), data).map_err(|e| e.to_string())
    }

    pub fn to_vector(&self) -> std::result::Result<Array1<f64>, String> {
        if self.dims.len() != 1 {
            return Err(format!("expected rank 1, found rank {}", self.dims.len()));
        }
        Ok(self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

fn checked_numel(dims: &[usize]) -> std::result::Result<usize, FormatError> {
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match numel {
        Some(n) if n.checked_mul(4).is_some() => Ok(n),
        _ => Err(FormatError::DimOverflow(format!("{dims:?} overflows"))),
    }
}

pub fn encode_tensor(t: &TensorF32) -> std::result::Result<Vec<u8>, FormatError> {
    t.validate()?;
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<TensorF32, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let read_u32 = |at: usize| -> std::result::Result<u32, FormatError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(FormatError::TruncatedHeader)
    };
    let rank = read_u32(4)?;
    if rank > MAX_RANK {
        return Err(FormatError::DimOverflow(format!("rank {rank} > {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for axis in 0..rank as usize {
        let d = read_u32(8 + 4 * axis)? as usize;
        if d == 0 {
            return Err(FormatError::ZeroDim(axis));
        }
        dims.push(d);
    }
    let numel = checked_numel(&dims)?;
    let header = 8 + 4 * rank as usize;
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(FormatError::LengthMismatch {
            expected: numel * 4,
            found: payload.len(),
        });
    }
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        data.push(v);
    }
    Ok(TensorF32 { dims, data })
}

pub fn write_tensor(t: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorF32> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Linear classifier head: `logits = features . weights^T + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// C x d
    pub weights: Array2<f64>,
    /// C
    pub bias: Array1<f64>,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }
}

/// One zoo member as seen from the target set.
#[derive(Debug, Clone)]
pub struct ModelRecord {
    pub id: String,
    pub domain: String,
    pub arch: String,
    /// n x d_m target features, frozen.
    pub features: Array2<f64>,
    pub head: Head,
    pub meta: BTreeMap<String, String>,
}

impl ModelRecord {
    pub fn new(
        id: impl Into<String>,
        domain: impl Into<String>,
        arch: impl Into<String>,
        features: Array2<f64>,
        head: Head,
    ) -> Result<Self> {
        let rec = ModelRecord {
            id: id.into(),
            domain: domain.into(),
            arch: arch.into(),
            features,
            head,
            meta: BTreeMap::new(),
        };
        rec.check_shapes()?;
        Ok(rec)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        let (c, d) = self.head.weights.dim();
        if c != self.head.bias.len() {
            return Err(Error::Shape(format!(
                "model `{}`: weights have {c} rows but bias has {} entries",
                self.id,
                self.head.bias.len()
            )));
        }
        if d != self.features.ncols() {
            return Err(Error::Shape(format!(
                "model `{}`: weights expect {d} features, feature matrix has {}",
                self.id,
                self.features.ncols()
            )));
        }
        if c < 2 {
            return Err(Error::Shape(format!("model `{}`: need at least 2 classes", self.id)));
        }
        Ok(())
    }
}

/// Unlabeled target set descriptor. The label path is carried but never
/// opened by anything in estimation, selection, or adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub n: usize,
    pub classes: usize,
    pub labels_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub n: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub domain: String,
    pub arch: String,
    pub features: String,
    pub weights: String,
    pub bias: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub version: u32,
    pub target: TargetEntry,
    pub models: Vec<ModelEntry>,
}

impl ZooManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ZooManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {}, expected {MANIFEST_VERSION}",
                m.version
            )));
        }
        let mut seen = HashSet::new();
        for e in &m.models {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateModelId(e.id.clone()));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    read_tensor(path)?
        .to_matrix()
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

fn read_vector(path: &Path) -> Result<Array1<f64>> {
    read_tensor(path)?
        .to_vector()
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}

pub fn target_bundle(manifest: &ZooManifest, base: &Path) -> TargetBundle {
    TargetBundle {
        n: manifest.target.n,
        classes: manifest.target.classes,
        labels_path: manifest.target.labels.as_deref().map(|l| resolve(base, l)),
    }
}

pub fn load_model(entry: &ModelEntry, base: &Path) -> Result<ModelRecord> {
    let features = read_matrix(&resolve(base, &entry.features))?;
    let weights = read_matrix(&resolve(base, &entry.weights))?;
    let bias = read_vector(&resolve(base, &entry.bias))?;
    let mut rec = ModelRecord::new(
        entry.id.clone(),
        entry.domain.clone(),
        entry.arch.clone(),
        features,
        Head { weights, bias },
    )?;
    rec.meta = entry.meta.clone();
    Ok(rec)
}

/// Load every model named in the manifest and check the zoo-wide invariants
/// (shared target size `n` and class count `C`).
pub fn load_zoo(manifest_path: impl AsRef<Path>) -> Result<(Vec<ModelRecord>, TargetBundle)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = ZooManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let target = target_bundle(&manifest, base);
    if target.classes < 2 || target.n == 0 {
        return Err(Error::Manifest(format!(
            "target must have n >= 1 and C >= 2, found n={} C={}",
            target.n, target.classes
        )));
    }
    let mut models = Vec::with_capacity(manifest.models.len());
    for entry in &manifest.models {
        let rec = load_model(entry, base)?;
        if rec.n() != target.n {
            return Err(Error::TargetSizeMismatch {
                found: rec.n(),
                expected: target.n,
                model: rec.id,
            });
        }
        if rec.classes() != target.classes {
            return Err(Error::ClassCountMismatch {
                found: rec.classes(),
                expected: target.classes,
                model: rec.id,
            });
        }
        models.push(rec);
    }
    Ok((models, target))
}

/// Write a model's three tensors into `dir` as `<id>.features.ztf`,
/// `<id>.weights.ztf`, `<id>.bias.ztf` and return the manifest entry.
pub fn write_model(rec: &ModelRecord, dir: &Path) -> Result<ModelEntry> {
    let names = [
        format!("{}.features.ztf", rec.id),
        format!("{}.weights.ztf", rec.id),
        format!("{}.bias.ztf", rec.id),
    ];
    write_tensor(&TensorF32::from_matrix(&rec.features), dir.join(&names[0]))?;
    write_head(&rec.head, &dir.join(&names[1]), &dir.join(&names[2]))?;
    let [features, weights, bias] = names;
    Ok(ModelEntry {
        id: rec.id.clone(),
        domain: rec.domain.clone(),
        arch: rec.arch.clone(),
        features,
        weights,
        bias,
        meta: rec.meta.clone(),
    })
}

pub fn write_head(head: &Head, weights_path: &Path, bias_path: &Path) -> Result<()> {
    write_tensor(&TensorF32::from_matrix(&head.weights), weights_path)?;
    write_tensor(&TensorF32::from_vector(&head.bias), bias_path)
}

pub fn read_head(weights_path: &Path, bias_path: &Path) -> Result<Head> {
    let weights = read_matrix(weights_path)?;
    let bias = read_vector(bias_path)?;
    if weights.nrows() != bias.len() {
        return Err(Error::Shape(format!(
            "{}: head has {} weight rows and {} biases",
            weights_path.display(),
            weights.nrows(),
            bias.len()
        )));
    }
    Ok(Head { weights, bias })
}
