//! On-disk layout.
//!
//! A bundle is a JSON manifest at `path` plus a little-endian payload at
//! `path.bin`: f32 embeddings in `[sample][view][dim]` order, then one i32 label
//! per sample, then the labeled mask packed eight samples per byte (LSB first).
//!
//! A dictionary is a JSON manifest at `path`, newline-delimited concept names
//! at `path.names` and f32 text embeddings `[concept][dim]` at `path.bin`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ConceptDictionary, EmbeddingBundle};
use crate::error::{invalid, Error, Result};

pub const BUNDLE_MAGIC: &str = "SGCD1";
pub const DICT_MAGIC: &str = "SGCD1-DICT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub magic: String,
    pub n_samples: usize,
    pub embed_dim: usize,
    pub n_views: usize,
    pub n_classes_total: usize,
    pub old_class_set: Vec<u32>,
    pub encoder_id: String,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryManifest {
    pub magic: String,
    pub m_concepts: usize,
    pub embed_dim: usize,
    pub encoder_id: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `path` with `.ext` appended, where binary payloads live.
pub fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub(crate) fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

fn unpack_mask(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("manifest serializes");
    s.push(b'\n');
    s
}

fn f32s_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn bundle_payload(bundle: &EmbeddingBundle) -> Vec<u8> {
    let n = bundle.n_samples();
    let mut out = Vec::with_capacity(bundle.embeddings().len() * 4 + n * 4 + n.div_ceil(8));
    for x in bundle.embeddings().iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &y in bundle.labels() {
        out.extend_from_slice(&(y as i32).to_le_bytes());
    }
    out.extend_from_slice(&pack_mask(bundle.is_labeled()));
    out
}

pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<BundleManifest> {
    let path = path.as_ref();
    let payload = bundle_payload(bundle);
    let manifest = BundleManifest {
        magic: BUNDLE_MAGIC.to_string(),
        n_samples: bundle.n_samples(),
        embed_dim: bundle.embed_dim(),
        n_views: bundle.n_views(),
        n_classes_total: bundle.n_classes(),
        old_class_set: bundle.old_classes().iter().copied().collect(),
        encoder_id: bundle.encoder_id().to_string(),
        payload_sha256: sha256_hex(&payload),
    };
    write(&sidecar(path, "bin"), &payload)?;
    write(path, &to_json(&manifest))?;
    Ok(manifest)
}

pub fn read_bundle_manifest(path: &Path) -> Result<BundleManifest> {
    let manifest: BundleManifest = serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {BUNDLE_MAGIC:?}, found {:?}",
            manifest.magic
        )));
    }
    Ok(manifest)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let m = read_bundle_manifest(path)?;
    let payload = read(&sidecar(path, "bin"))?;

    let n_emb = m
        .n_samples
        .checked_mul(m.n_views)
        .and_then(|x| x.checked_mul(m.embed_dim))
        .ok_or_else(|| Error::Format("manifest dimensions overflow".into()))?;
    let expected = n_emb * 4 + m.n_samples * 4 + m.n_samples.div_ceil(8);
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: manifest implies {expected} bytes, found {}",
            payload.len()
        )));
    }
    let digest = sha256_hex(&payload);
    if digest != m.payload_sha256 {
        return Err(Error::Format(format!(
            "payload digest mismatch: manifest {}, payload {digest}",
            m.payload_sha256
        )));
    }

    let (emb_bytes, rest) = payload.split_at(n_emb * 4);
    let (label_bytes, mask_bytes) = rest.split_at(m.n_samples * 4);
    let values = f32s_le(emb_bytes);
    if values.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("NaN or Inf in embedding payload"));
    }
    let embeddings = Array3::from_shape_vec((m.n_samples, m.n_views, m.embed_dim), values)
        .expect("length checked above");
    let labels = label_bytes
        .chunks_exact(4)
        .map(|c| {
            let y = i32::from_le_bytes(c.try_into().unwrap());
            u32::try_from(y).map_err(|_| invalid!("negative label {y}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let is_labeled = unpack_mask(mask_bytes, m.n_samples);
    let old: BTreeSet<u32> = m.old_class_set.iter().copied().collect();
    if old.len() != m.old_class_set.len() {
        return Err(invalid!("duplicate entries in old_class_set"));
    }
    EmbeddingBundle::new(m.encoder_id, embeddings, labels, is_labeled, old, m.n_classes_total)
}

pub fn save_dictionary(dict: &ConceptDictionary, path: impl AsRef<Path>) -> Result<DictionaryManifest> {
    let path = path.as_ref();
    let manifest = DictionaryManifest {
        magic: DICT_MAGIC.to_string(),
        m_concepts: dict.len(),
        embed_dim: dict.embed_dim(),
        encoder_id: dict.encoder_id().to_string(),
    };
    let mut names = dict.concepts().join("\n");
    names.push('\n');
    let mut payload = Vec::with_capacity(dict.embeddings().len() * 4);
    for x in dict.embeddings().iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write(&sidecar(path, "names"), names.as_bytes())?;
    write(&sidecar(path, "bin"), &payload)?;
    write(path, &to_json(&manifest))?;
    Ok(manifest)
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<ConceptDictionary> {
    let path = path.as_ref();
    let m: DictionaryManifest = serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if m.magic != DICT_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {DICT_MAGIC:?}, found {:?}",
            m.magic
        )));
    }
    let names_raw = read(&sidecar(path, "names"))?;
    let names = String::from_utf8(names_raw)
        .map_err(|_| Error::Format("concept names are not UTF-8".into()))?;
    let concepts: Vec<String> = names.lines().map(str::to_string).collect();
    if concepts.len() != m.m_concepts {
        return Err(Error::Format(format!(
            "manifest lists {} concepts, names file has {}",
            m.m_concepts,
            concepts.len()
        )));
    }
    let payload = read(&sidecar(path, "bin"))?;
    let expected = m.m_concepts * m.embed_dim * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: manifest implies {expected} bytes, found {}",
            payload.len()
        )));
    }
    let values = f32s_le(&payload);
    if values.iter().any(|x| !x.is_finite()) {
        return Err(invalid!("NaN or Inf in dictionary payload"));
    }
    let embeddings = Array2::from_shape_vec((m.m_concepts, m.embed_dim), values).unwrap();
    ConceptDictionary::new(m.encoder_id, concepts, embeddings)
}
