//! Checkpoint file: JSON manifest at `path`, payload at `path.bin` holding
//! every parameter tensor then every momentum tensor, in tensor-name order,
//! as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochSummary, EvalRecord, Precision, TrainConfig, TrainState};
use crate::dataset::format::sidecar;
use crate::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::representation::{HeadDims, HeadParameters};

pub const CHECKPOINT_MAGIC: &str = "SGCD1-CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub version: u32,
    pub precision: Precision,
    pub dims: HeadDims,
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    /// Retained concept names, in head input order.
    pub concepts: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub history: Vec<EpochSummary>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub payload_sha256: String,
}

fn encode<T: Real>(p: &HeadParameters<T>, out: &mut Vec<u8>) {
    for (_, t) in p.tensors() {
        for &x in t.iter() {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
}

fn decode<T: Real>(dims: HeadDims, bytes: &mut &[u8]) -> Result<HeadParameters<T>> {
    let mut p = HeadParameters::<T>::zeros(dims);
    for (_, mut t) in p.tensors_mut() {
        for x in t.iter_mut() {
            let (head, rest) = bytes
                .split_first_chunk::<8>()
                .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
            *x = T::of(f64::from_le_bytes(*head));
            *bytes = rest;
        }
    }
    Ok(p)
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    state: &TrainState<T>,
    cfg: &TrainConfig,
    concepts: &[String],
) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(16 * state.params.n_parameters());
    encode(&state.params, &mut payload);
    encode(&state.momentum, &mut payload);
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.into(),
        version: VERSION,
        precision: if T::NAME == "f64" { Precision::F64 } else { Precision::F32 },
        dims: state.params.dims,
        epoch: state.epoch,
        step: state.step,
        config: cfg.clone(),
        concepts: concepts.to_vec(),
        tensors: state
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                name: name.into(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        history: state.history.clone(),
        evals: state.evals.clone(),
        best: state.best.clone(),
        payload_sha256: sha256_hex(&payload),
    };
    let bin = sidecar(path, "bin");
    fs::write(&bin, &payload).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (magic {:?})", path.display(), m.magic)));
    }
    if m.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Loads a checkpoint into precision `T`. Values are stored as f64, so an
/// f32 run reloads bit-exactly.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(TrainState<T>, CheckpointManifest)> {
    let path = path.as_ref();
    let m = read_checkpoint_manifest(path)?;
    let bin = sidecar(path, "bin");
    let payload = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&payload) != m.payload_sha256 {
        return Err(Error::Format("checkpoint payload digest mismatch".into()));
    }
    let mut cursor: &[u8] = &payload;
    let params = decode::<T>(m.dims, &mut cursor)?;
    let momentum = decode::<T>(m.dims, &mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format("checkpoint payload has trailing bytes".into()));
    }
    if !params.is_finite() || !momentum.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite values".into()));
    }
    let state = TrainState {
        params,
        momentum,
        epoch: m.epoch,
        step: m.step,
        history: m.history.clone(),
        evals: m.evals.clone(),
        best: m.best.clone(),
    };
    Ok((state, m))
}
