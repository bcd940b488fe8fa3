//! Versioned, checksummed artifact container.
//!
//! Layout: a header line `MIXADC-BUNDLE v<version>`, a line
//! `sha256:<hex digest of payload>`, then the JSON payload.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::graph::{ParamStore, Tensor};

pub const BUNDLE_VERSION: u32 = 1;
const MAGIC: &str = "MIXADC-BUNDLE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.iter().copied().collect(),
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::CorruptBundle(format!("array {}: {e}", self.name)))
    }

    pub fn matrix(&self) -> Result<Array2<f64>> {
        self.tensor()?
            .into_dimensionality()
            .map_err(|e| Error::CorruptBundle(format!("array {}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    #[serde(flatten)]
    pub array: NamedArray,
    pub trainable: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l_cenet: f64,
    pub l_sel: f64,
    pub gamma3: f64,
    pub lr: f64,
    pub kappa: f64,
    /// `‖ũ‖₂² − M_A` at the end of the epoch (0 without learned allocation).
    pub r2: f64,
    /// `‖ũ‖₃³ − M_A`.
    pub r3: f64,
    pub binary_gap: f64,
    pub set_a: Vec<usize>,
    pub val_nmse: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_nmse: f64,
    pub params: Vec<ParamRecord>,
}

/// Deployed system plus everything needed to audit or resume the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactBundle {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Normalized pilot `P̃ ∈ R^{2K×Np}`.
    pub pilot: NamedArray,
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
    pub params: Vec<ParamRecord>,
    pub curves: Vec<EpochRecord>,
    pub epochs_done: usize,
    pub optimizer: Option<OptimizerState>,
    pub best: Option<BestSnapshot>,
}

pub fn params_to_records(store: &ParamStore) -> Vec<ParamRecord> {
    store
        .iter()
        .map(|(_, e)| ParamRecord {
            array: NamedArray::new(e.name.clone(), &e.value),
            trainable: e.trainable,
        })
        .collect()
}

pub fn records_to_params(records: &[ParamRecord]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for r in records {
        if store.id(&r.array.name).is_some() {
            return Err(Error::CorruptBundle(format!(
                "duplicate parameter {}",
                r.array.name
            )));
        }
        store.add(r.array.name.clone(), r.array.tensor()?, r.trainable);
    }
    Ok(store)
}

impl ArtifactBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("bundle serializes");
        let digest = hex::encode(Sha256::digest(&payload));
        let mut out = format!("{MAGIC} v{}\nsha256:{digest}\n", self.version).into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, rest) = split_line(bytes)?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|s| s.strip_prefix(" v"))
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::CorruptBundle("bad header".into()))?;
        if version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: BUNDLE_VERSION,
            });
        }
        let (sum, payload) = split_line(rest)?;
        let expected = sum
            .strip_prefix("sha256:")
            .ok_or_else(|| Error::CorruptBundle("missing checksum".into()))?;
        if hex::encode(Sha256::digest(payload)) != expected {
            return Err(Error::CorruptBundle("checksum mismatch".into()));
        }
        let bundle: Self = serde_json::from_slice(payload)
            .map_err(|e| Error::CorruptBundle(format!("payload: {e}")))?;
        if bundle.version != version {
            return Err(Error::VersionMismatch {
                found: bundle.version,
                expected: BUNDLE_VERSION,
            });
        }
        Ok(bundle)
    }

    /// Atomic write via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBundle(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let pos = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptBundle("truncated".into()))?;
    let line = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| Error::CorruptBundle("header is not text".into()))?;
    Ok((line, &bytes[pos + 1..]))
}
