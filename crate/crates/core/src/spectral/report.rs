//! Spectral report file: JSON manifest at `path`, payload at `path.bin` with
//! f64 eigenvalues, f64 importance, f64 mean and u32 retained indices, all
//! little-endian and in that order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::sha256_hex;
use crate::dataset::format::sidecar;
use crate::error::{Error, Result};

pub const REPORT_MAGIC: &str = "SGCD1-SPECTRAL";

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub mean: Array1<f64>,
    /// All computed eigenvalues, non-increasing.
    pub eigenvalues: Array1<f64>,
    /// The `k_star` retained eigenvectors as columns; not persisted.
    pub eigenvectors: Option<Array2<f64>>,
    /// Sum of the full spectrum (`trace(G)`).
    pub total_variance: f64,
    pub k_star: usize,
    pub importance: Array1<f64>,
    /// Retained concept indices by descending importance.
    pub retained_indices: Vec<usize>,
    pub beta_e: f64,
    pub beta_c: f64,
    /// Set when the low-rank solver produced the spectrum.
    pub top_k: Option<usize>,
    pub n_samples: usize,
    pub teacher_digest: Option<String>,
    pub dictionary_digest: Option<String>,
}

impl SpectralReport {
    pub fn m_concepts(&self) -> usize {
        self.importance.len()
    }

    pub fn explained_variance(&self) -> f64 {
        self.eigenvalues.iter().take(self.k_star).sum::<f64>() / self.total_variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub magic: String,
    pub version: u32,
    pub beta_e: f64,
    pub beta_c: f64,
    pub k_star: usize,
    pub m_concepts: usize,
    pub n_samples: usize,
    pub n_eigenvalues: usize,
    pub n_retained: usize,
    pub total_variance: f64,
    pub top_k: Option<usize>,
    pub teacher_digest: Option<String>,
    pub dictionary_digest: Option<String>,
    pub payload_sha256: String,
}

fn payload(report: &SpectralReport) -> Vec<u8> {
    let mut out = Vec::new();
    for x in report.eigenvalues.iter().chain(&report.importance).chain(&report.mean) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &j in &report.retained_indices {
        out.extend_from_slice(&(j as u32).to_le_bytes());
    }
    out
}

pub fn save_report(report: &SpectralReport, path: impl AsRef<Path>) -> Result<ReportManifest> {
    let path = path.as_ref();
    let bytes = payload(report);
    let manifest = ReportManifest {
        magic: REPORT_MAGIC.into(),
        version: 1,
        beta_e: report.beta_e,
        beta_c: report.beta_c,
        k_star: report.k_star,
        m_concepts: report.m_concepts(),
        n_samples: report.n_samples,
        n_eigenvalues: report.eigenvalues.len(),
        n_retained: report.retained_indices.len(),
        total_variance: report.total_variance,
        top_k: report.top_k,
        teacher_digest: report.teacher_digest.clone(),
        dictionary_digest: report.dictionary_digest.clone(),
        payload_sha256: sha256_hex(&bytes),
    };
    let bin = sidecar(path, "bin");
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<SpectralReport> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: ReportManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if m.magic != REPORT_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {REPORT_MAGIC:?}, found {:?}",
            m.magic
        )));
    }
    let bin = sidecar(path, "bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = (m.n_eigenvalues + 2 * m.m_concepts) * 8 + m.n_retained * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: manifest implies {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if sha256_hex(&bytes) != m.payload_sha256 {
        return Err(Error::Format("payload digest mismatch".into()));
    }
    let (floats, ints) = bytes.split_at((m.n_eigenvalues + 2 * m.m_concepts) * 8);
    let f: Vec<f64> = floats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (eig, rest) = f.split_at(m.n_eigenvalues);
    let (imp, mean) = rest.split_at(m.m_concepts);
    let retained: Vec<usize> = ints
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if retained.iter().any(|&j| j >= m.m_concepts) {
        return Err(Error::Format("retained index out of range".into()));
    }
    Ok(SpectralReport {
        mean: Array1::from(mean.to_vec()),
        eigenvalues: Array1::from(eig.to_vec()),
        eigenvectors: None,
        total_variance: m.total_variance,
        k_star: m.k_star,
        importance: Array1::from(imp.to_vec()),
        retained_indices: retained,
        beta_e: m.beta_e,
        beta_c: m.beta_c,
        top_k: m.top_k,
        n_samples: m.n_samples,
        teacher_digest: m.teacher_digest,
        dictionary_digest: m.dictionary_digest,
    })
}
