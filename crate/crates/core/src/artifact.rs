//! Binary container for trained models.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `ADHM` |
//! | 4 | `u32` format version |
//! | 8 | `u64` manifest length `m` |
//! | m | UTF-8 JSON [`Manifest`] |
//! | 8 | `u64` scalar count `n` |
//! | 8n | `f64` parameters in manifest order, row-major |
//!
//! The manifest carries the payload's SHA-256, so truncation and bit flips
//! are caught on load. Writing the same model twice gives identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelKind;
use crate::dataset::{FeatureNames, NormalizationStats};
use crate::error::{Error, Result};
use crate::lstm::{Lstm, LstmArch};
use crate::nn::params::ParamShape;
use crate::nn::ParamStore;
use crate::slvm::{Slvm, SlvmArch};
use crate::trajectory::SequenceModel;

pub const MAGIC: [u8; 4] = *b"ADHM";
pub const FORMAT_VERSION: u32 = 1;
/// File extension used by the command-line workflows.
pub const EXTENSION: &str = "adhm";

/// Where a model came from; stored alongside its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// SHA-256 of the cohort file the model was trained on.
    pub data_sha256: Option<String>,
    pub seed: u64,
    /// Cross-validation round, or `None` for a model fit on all training ids.
    pub fold: Option<usize>,
    pub feature_names: FeatureNames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    #[serde(flatten)]
    pub provenance: Provenance,
    /// [`SlvmArch`] or [`LstmArch`] depending on `kind`.
    pub arch: serde_json::Value,
    pub stats: NormalizationStats,
    pub threshold: f64,
    pub target_variance: Option<Vec<f64>>,
    pub params: Vec<ParamShape>,
    pub payload_sha256: String,
}

#[derive(Debug, Clone)]
pub enum Model {
    Slvm(Slvm),
    Lstm(Lstm),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Slvm(_) => ModelKind::Slvm,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn as_sequence_model(&self) -> &dyn SequenceModel {
        match self {
            Model::Slvm(m) => m,
            Model::Lstm(m) => m,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Slvm(m) => &m.params,
            Model::Lstm(m) => &m.params,
        }
    }

    pub fn as_slvm(&self) -> Option<&Slvm> {
        match self {
            Model::Slvm(m) => Some(m),
            Model::Lstm(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub model: Model,
    pub provenance: Provenance,
}

fn payload_bytes(flat: &[f64]) -> Vec<u8> {
    flat.iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Artifact(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Artifact(format!("{what} {v} does not fit in memory")))
    }
}

impl ModelArtifact {
    pub fn manifest(&self) -> Manifest {
        let flat = self.model.params().flatten();
        let (arch, stats, threshold, target_variance) = match &self.model {
            Model::Slvm(m) => (
                serde_json::to_value(&m.arch).expect("arch serializes"),
                m.stats.clone(),
                m.threshold,
                None,
            ),
            Model::Lstm(m) => (
                serde_json::to_value(&m.arch).expect("arch serializes"),
                m.stats.clone(),
                m.threshold,
                Some(m.target_variance.clone()),
            ),
        };
        Manifest {
            format_version: FORMAT_VERSION,
            kind: self.model.kind(),
            provenance: self.provenance.clone(),
            arch,
            stats,
            threshold,
            target_variance,
            params: self.model.params().shapes(),
            payload_sha256: hex::encode(Sha256::digest(payload_bytes(&flat))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let flat = self.model.params().flatten();
        let mut out = Vec::with_capacity(24 + manifest.len() + 8 * flat.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload_bytes(&flat));
        out
    }

    /// Reads only the manifest, without rebuilding the model.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Artifact("not a model artifact (bad magic)".into()));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Artifact(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u64("manifest length")?;
        let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)?;
        Ok((manifest, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, pos) = Self::read_manifest(bytes)?;
        let mut r = Reader { bytes, pos };
        let count = r.u64("scalar count")?;
        let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Artifact("payload too large".into()))?, "payload")?;
        if r.pos != bytes.len() {
            return Err(Error::Artifact(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(Error::Artifact("payload checksum mismatch".into()));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let params = ParamStore::from_flat(&manifest.params, &flat)?;
        let bad_arch = |e: serde_json::Error| Error::Artifact(format!("architecture: {e}"));
        let model = match manifest.kind {
            ModelKind::Slvm => {
                let arch: SlvmArch = serde_json::from_value(manifest.arch).map_err(bad_arch)?;
                Model::Slvm(Slvm::from_parts(arch, manifest.stats, params, manifest.threshold)?)
            }
            ModelKind::Lstm => {
                let arch: LstmArch = serde_json::from_value(manifest.arch).map_err(bad_arch)?;
                let variance = manifest
                    .target_variance
                    .ok_or_else(|| Error::Artifact("lstm artifact without target variance".into()))?;
                Model::Lstm(Lstm::from_parts(arch, manifest.stats, params, manifest.threshold, variance)?)
            }
        };
        Ok(Self {
            model,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Artifact(msg) => Error::Artifact(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
