//! End-to-end workflows: load, split, train per fold, evaluate, simulate and
//! attribute. Every step is a pure function of the run config and the data,
//! so repeating a run reproduces its artifacts byte for byte.
//!
//! Output directory layout:
//!
//! ```text
//! <output>/config.toml              resolved config
//! <output>/splits.csv               id,assignment
//! <output>/models/<kind>_fold<i>.adhm
//! <output>/models/<kind>_fold<i>.history.json
//! <output>/report/*.csv             metric tables and plot-ready series
//! <output>/simulation.csv           per-fold intervention deltas
//! <output>/importance.csv           attribution ranking
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{Model, ModelArtifact, Provenance, EXTENSION};
use crate::attribution::{integrated_gradients, rank_features, AttributionConfig, AttributionResult, FeatureImportance, Target};
use crate::config::{ModelKind, RunConfig};
use crate::dataset::{
    fit_normalization, make_splits, read_cohort, Cohort, ColumnMapping, PatientRecord, SequenceBatch, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{random_baseline, run_protocol, BaselineKind, BaselineSpec, EvalConfig, Protocol, ProtocolResult};
use crate::lstm::{self, Lstm};
use crate::slvm::{self, Scenario, Slvm};
use crate::trajectory::SequenceModel;

pub const CONFIG_FILE: &str = "config.toml";
pub const SPLITS_FILE: &str = "splits.csv";
pub const MODELS_DIR: &str = "models";
pub const REPORT_DIR: &str = "report";
pub const SIMULATION_FILE: &str = "simulation.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";

/// Start step of the intervention comparison: three visits and two actions
/// observed, then `a_3..a_5` set by the scenario.
pub const SIMULATION_START: usize = 3;

/// A loaded cohort with its split.
#[derive(Debug, Clone)]
pub struct RunData {
    pub cohort: Cohort,
    pub splits: SplitSpec,
    pub data_sha256: Option<String>,
}

impl RunData {
    /// Builds the split from `config.split` (or the configured sidecar).
    pub fn new(cohort: Cohort, config: &RunConfig, data_sha256: Option<String>) -> Result<Self> {
        let splits = match &config.data.splits {
            Some(path) => {
                let s = SplitSpec::read_sidecar(path, config.split.test_fraction)?;
                s.check_against(&cohort)?;
                s
            }
            None => make_splits(&cohort, config.split.seed, config.split.test_fraction, config.split.folds)?,
        };
        Ok(Self {
            cohort,
            splits,
            data_sha256,
        })
    }

    pub fn test_records(&self) -> Vec<&PatientRecord> {
        self.cohort.select(&self.splits.test_ids())
    }
}

/// Reads the cohort named by `config.data`, hashing the raw file.
pub fn load_data(config: &RunConfig) -> Result<RunData> {
    let path = config
        .data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))?;
    let mapping = match &config.data.mapping {
        Some(m) => ColumnMapping::load(m)?,
        None => ColumnMapping::default(),
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cohort = read_cohort(bytes.as_slice(), &mapping)?;
    RunData::new(cohort, config, Some(hex::encode(Sha256::digest(&bytes))))
}

/// Training generator for one fold; `None` is the model fit on every
/// training id. Streams keep folds independent of training order.
fn fold_rng(seed: u64, fold: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold.map_or(0, |f| f as u64 + 1));
    rng
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub artifact: ModelArtifact,
    /// Per-epoch training history as JSON.
    pub history: serde_json::Value,
}

/// Trains one model. With `fold = Some(i)` fold `i` is held out for early
/// stopping; with `None` every training id is used and no early stopping
/// applies.
pub fn train_model(config: &RunConfig, data: &RunData, kind: ModelKind, fold: Option<usize>) -> Result<TrainedModel> {
    let (train_ids, val_ids) = match fold {
        Some(i) if i >= data.splits.k => {
            return Err(Error::InvalidArgument(format!("fold {i} outside 0..{}", data.splits.k)))
        }
        Some(i) => (data.splits.train_ids_excluding(i), data.splits.fold_ids(i)),
        None => (data.splits.train_ids(), Vec::new()),
    };
    let stats = fit_normalization(&data.cohort, &train_ids)?;
    let use_post = config.data.use_post_withdrawal_scores;
    let train = SequenceBatch::from_records(&data.cohort.select(&train_ids), &stats, use_post)?;
    let val = if val_ids.is_empty() {
        None
    } else {
        Some(SequenceBatch::from_records(&data.cohort.select(&val_ids), &stats, use_post)?)
    };
    let mut rng = fold_rng(config.seed, fold);
    log::info!("training {kind} fold {fold:?} on {} patients", train.len());
    let (model, history) = match kind {
        ModelKind::Slvm => {
            let mut m = Slvm::new(config.slvm.arch.clone(), stats, &mut rng)?;
            m.threshold = config.eval.threshold;
            let h = slvm::fit(&mut m, &train, val.as_ref(), &config.slvm.train, &mut rng)?;
            (Model::Slvm(m), serde_json::to_value(h)?)
        }
        ModelKind::Lstm => {
            let mut m = Lstm::new(config.lstm.arch.clone(), stats, &mut rng)?;
            m.threshold = config.eval.threshold;
            let h = lstm::fit(&mut m, &train, val.as_ref(), &config.lstm.train, &mut rng)?;
            (Model::Lstm(m), serde_json::to_value(h)?)
        }
    };
    Ok(TrainedModel {
        artifact: ModelArtifact {
            model,
            provenance: Provenance {
                config_hash: config.hash(),
                data_sha256: data.data_sha256.clone(),
                seed: config.seed,
                fold,
                feature_names: data.cohort.feature_names.clone(),
            },
        },
        history,
    })
}

/// One model per cross-validation fold, in fold order.
pub fn train_folds(config: &RunConfig, data: &RunData, kind: ModelKind) -> Result<Vec<TrainedModel>> {
    (0..data.splits.k).map(|i| train_model(config, data, kind, Some(i))).collect()
}

pub fn artifact_path(dir: &Path, kind: ModelKind, fold: Option<usize>) -> PathBuf {
    let stem = match fold {
        Some(i) => format!("{kind}_fold{i}"),
        None => format!("{kind}_full"),
    };
    dir.join(MODELS_DIR).join(format!("{stem}.{EXTENSION}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config and the split sidecar.
pub fn write_run_header(dir: &Path, config: &RunConfig, data: &RunData) -> Result<()> {
    write_file(&dir.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.splits.write_sidecar(&dir.join(SPLITS_FILE))
}

/// Saves artifacts and histories; returns the artifact paths.
pub fn write_models(dir: &Path, models: &[TrainedModel]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(models.len());
    for m in models {
        let path = artifact_path(dir, m.artifact.model.kind(), m.artifact.provenance.fold);
        m.artifact.save(&path)?;
        let history = serde_json::to_vec_pretty(&m.history)?;
        write_file(&path.with_extension("history.json"), &history)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Groups artifacts by kind, each group ordered by fold.
fn by_kind(artifacts: &[ModelArtifact]) -> BTreeMap<ModelKind, Vec<&ModelArtifact>> {
    let mut groups: BTreeMap<ModelKind, Vec<&ModelArtifact>> = BTreeMap::new();
    for a in artifacts {
        groups.entry(a.model.kind()).or_default().push(a);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|a| a.provenance.fold);
    }
    groups
}

fn eval_config(config: &RunConfig, data: &RunData, protocol: Protocol) -> EvalConfig {
    EvalConfig {
        protocol,
        samples: config.eval.samples,
        seed: config.eval.seed,
        use_post_withdrawal_scores: config.data.use_post_withdrawal_scores,
        positive: config.eval.positive,
        score_names: data.cohort.feature_names.scores.clone(),
        chunk: config.eval.chunk,
    }
}

/// Scores every model group on the test set under each protocol, plus the
/// two random baselines for the one-step protocol.
pub fn evaluate(
    config: &RunConfig,
    data: &RunData,
    artifacts: &[ModelArtifact],
    protocols: &[Protocol],
) -> Result<ProtocolResult> {
    let records = data.test_records();
    if records.is_empty() {
        return Err(Error::InvalidArgument("the split has no test patients".into()));
    }
    let mut results = Vec::new();
    for (kind, group) in by_kind(artifacts) {
        let models: Vec<&dyn SequenceModel> = group.iter().map(|a| a.model.as_sequence_model()).collect();
        for &protocol in protocols {
            log::info!("evaluating {} {kind} models, {protocol}", models.len());
            results.push(run_protocol(&models, &records, &eval_config(config, data, protocol))?);
        }
    }
    if protocols.contains(&Protocol::OneStep) {
        let ec = eval_config(config, data, Protocol::OneStep);
        for kind in [BaselineKind::UniformRandomScore, BaselineKind::RandomAdherence] {
            let spec = BaselineSpec::default_support(kind, &records, config.eval.seed);
            results.push(random_baseline(&spec, &records, &ec)?);
        }
    }
    Ok(ProtocolResult::merge(results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEffect {
    pub fold: Option<usize>,
    pub patients: usize,
    pub treat_mean: f64,
    pub stop_mean: f64,
    /// `treat_mean - stop_mean`, raw score units.
    pub delta: f64,
}

/// All-ones versus all-zeros actions from [`SIMULATION_START`] for test
/// patients still treated at that point, one result per latent-model artifact.
pub fn simulator_effect(config: &RunConfig, data: &RunData, artifacts: &[ModelArtifact]) -> Result<Vec<FoldEffect>> {
    let t = SIMULATION_START;
    let records: Vec<&PatientRecord> = data
        .test_records()
        .into_iter()
        .filter(|r| r.y[..t - 1].iter().all(|&v| v == 1))
        .collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("no test patients adherent through step {}", t - 1)));
    }
    let n_actions = crate::dataset::NUM_INTERVALS + 1 - t;
    let scenarios = [
        Scenario {
            name: "treat".into(),
            actions: vec![1.0; n_actions],
        },
        Scenario {
            name: "stop".into(),
            actions: vec![0.0; n_actions],
        },
    ];
    let mut out = Vec::new();
    for a in by_kind(artifacts).remove(&ModelKind::Slvm).unwrap_or_default() {
        let model = a.model.as_slvm().expect("grouped by kind");
        let batch = SequenceBatch::from_records(&records, &model.stats, config.data.use_post_withdrawal_scores)?;
        let sim = model.simulate_interventions(&batch, t, &scenarios, config.eval.samples, config.eval.seed)?;
        out.push(FoldEffect {
            fold: a.provenance.fold,
            patients: records.len(),
            treat_mean: sim.scenarios[0].final_mean,
            stop_mean: sim.scenarios[1].final_mean,
            delta: sim.deltas[0][1],
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("intervention simulation needs a latent-model artifact".into()));
    }
    Ok(out)
}

pub fn write_effects(path: &Path, effects: &[FoldEffect]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "patients", "treat_mean", "stop_mean", "delta"])?;
    for e in effects {
        w.write_record([
            e.fold.map_or_else(|| "full".to_string(), |f| f.to_string()),
            e.patients.to_string(),
            e.treat_mean.to_string(),
            e.stop_mean.to_string(),
            e.delta.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Integrated gradients of `target` for every test patient.
pub fn attribute(
    config: &RunConfig,
    data: &RunData,
    artifact: &ModelArtifact,
    target: Target,
) -> Result<(Vec<AttributionResult>, Vec<FeatureImportance>)> {
    let model = artifact
        .model
        .as_slvm()
        .ok_or_else(|| Error::InvalidArgument("attribution needs a latent-model artifact".into()))?;
    let records = data.test_records();
    if records.is_empty() {
        return Err(Error::InvalidArgument("the split has no test patients".into()));
    }
    let batch = SequenceBatch::from_records(&records, &model.stats, config.data.use_post_withdrawal_scores)?;
    let ac = AttributionConfig {
        target,
        path_steps: config.attribution.path_steps,
        noise_samples: config.attribution.noise_samples,
        seed: config.attribution.seed,
        ..AttributionConfig::default()
    };
    let results = integrated_gradients(model, &batch, None, &ac)?;
    let ranking = rank_features(&results, &artifact.provenance.feature_names.statics)?;
    Ok((results, ranking))
}
