//! Run configuration shared by the command-line workflows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{DEFAULT_NOISE_SAMPLES, DEFAULT_PATH_STEPS};
use crate::error::{Error, Result};
use crate::eval::PositiveClass;
use crate::lstm::{LstmArch, LstmTrainConfig};
use crate::slvm::{SlvmArch, SlvmTrainConfig};
use crate::trajectory::{DEFAULT_SAMPLES, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Slvm,
    Lstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Slvm => "slvm",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slvm" => Ok(ModelKind::Slvm),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cohort CSV.
    pub path: Option<PathBuf>,
    /// Column-mapping TOML; the canonical header is assumed when absent.
    pub mapping: Option<PathBuf>,
    /// Existing `id,assignment` sidecar; generated from `split` when absent.
    pub splits: Option<PathBuf>,
    pub use_post_withdrawal_scores: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_fraction: f64,
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlvmSection {
    pub arch: SlvmArch,
    pub train: SlvmTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSection {
    pub arch: LstmArch,
    pub train: LstmTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Latent samples `K` per prediction.
    pub samples: usize,
    pub threshold: f64,
    pub seed: u64,
    pub positive: PositiveClass,
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            positive: PositiveClass::Continuation,
            chunk: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub path_steps: usize,
    pub noise_samples: usize,
    pub seed: u64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            path_steps: DEFAULT_PATH_STEPS,
            noise_samples: DEFAULT_NOISE_SAMPLES,
            seed: 0,
        }
    }
}

/// Everything a run depends on. Defaults are the published training setup.
///
/// ```toml
/// model = "slvm"
/// seed = 7
/// output = "runs/a"
///
/// [data]
/// path = "cohort.csv"
///
/// [slvm.train]
/// max_epochs = 300
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Seed for parameter initialization, shuffling, Mixup and dropout.
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub slvm: SlvmSection,
    pub lstm: LstmSection,
    pub eval: EvalSection,
    pub attribution: AttributionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Slvm,
            seed: 0,
            output: PathBuf::from("out"),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            slvm: SlvmSection::default(),
            lstm: LstmSection::default(),
            eval: EvalSection::default(),
            attribution: AttributionSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!("split.test_fraction {} outside (0, 1)", self.split.test_fraction));
        }
        if self.split.folds < 2 {
            return bad(format!("split.folds must be at least 2, got {}", self.split.folds));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return bad(format!("eval.threshold {} outside [0, 1]", self.eval.threshold));
        }
        if self.eval.samples == 0 || self.eval.chunk == 0 {
            return bad("eval.samples and eval.chunk must be positive".into());
        }
        for (name, p) in [("slvm", self.slvm.train.dropout), ("lstm", self.lstm.train.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name}.train.dropout {p} outside [0, 1)"));
            }
        }
        for (name, alpha) in [("slvm", self.slvm.train.mixup_alpha), ("lstm", self.lstm.train.mixup_alpha)] {
            if alpha.is_some_and(|a| !(a > 0.0)) {
                return bad(format!("{name}.train.mixup_alpha must be positive"));
            }
        }
        if self.attribution.path_steps < crate::attribution::MIN_PATH_STEPS {
            return bad(format!(
                "attribution.path_steps must be at least {}",
                crate::attribution::MIN_PATH_STEPS
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form with every file path removed, so
    /// moving the data or output directory keeps the hash.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("output");
        obj.remove("data");
        obj.insert(
            "use_post_withdrawal_scores".into(),
            self.data.use_post_withdrawal_scores.into(),
        );
        // serde_json maps are ordered by key, so this is canonical.
        let text = serde_json::to_string(&value).expect("json value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_setup() {
        let c = RunConfig::default();
        for (lr, batch, clip, dropout, alpha) in [
            (
                c.slvm.train.optimizer.lr,
                c.slvm.train.batch_size,
                c.slvm.train.clip,
                c.slvm.train.dropout,
                c.slvm.train.mixup_alpha,
            ),
            (
                c.lstm.train.optimizer.lr,
                c.lstm.train.batch_size,
                c.lstm.train.clip,
                c.lstm.train.dropout,
                c.lstm.train.mixup_alpha,
            ),
        ] {
            assert_eq!((lr, batch, clip, dropout, alpha), (0.001, 64, 0.8, 0.05, Some(0.2)));
        }
        assert_eq!((c.slvm.arch.latent1, c.slvm.arch.latent2), (32, 32));
        assert_eq!(c.slvm.arch.hidden, vec![128; 5]);
        assert_eq!((c.lstm.arch.hidden, c.lstm.arch.layers), (128, 2));
        assert_eq!((c.eval.samples, c.eval.threshold), (100, 0.5));
        assert_eq!((c.split.folds, c.split.test_fraction), (5, 0.2));
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("model = \"lstm\"\nseed = 3\n[slvm.train]\nmax_epochs = 7\n").unwrap();
        assert_eq!(c.model, ModelKind::Lstm);
        assert_eq!(c.seed, 3);
        assert_eq!(c.slvm.train.max_epochs, 7);
        assert_eq!(c.slvm.train.patience, 50);
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.data.path = Some("a/b.csv".into());
        c.lstm.train.mixup_alpha = None;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("epochs = 3\n").is_err());
        assert!(RunConfig::from_toml("[slvm.train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("model = \"gru\"\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[split]\nfolds = 1\n").is_err());
        assert!(RunConfig::from_toml("[eval]\nthreshold = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[lstm.train]\ndropout = 1.0\n").is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_hyperparameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output = "elsewhere".into();
        b.data.path = Some("x.csv".into());
        b.data.mapping = Some("m.toml".into());
        assert_eq!(a.hash(), b.hash());
        b.slvm.train.clip = 0.9;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.data.use_post_withdrawal_scores = true;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
