//! Subcommand implementations. Each returns the process exit status.

use std::path::{Path, PathBuf};

use adhere_core::artifact::ModelArtifact;
use adhere_core::attribution::{write_importance, Target};
use adhere_core::config::{ModelKind, RunConfig};
use adhere_core::criteria::{self, Check};
use adhere_core::dataset::{write_cohort, DEFAULT_STATIC_NAMES, DISTANCE_FEATURE};
use adhere_core::eval::{emit_report, score_histogram, Metric, Protocol};
use adhere_core::pipeline;
use adhere_core::synth::{generate, SynthConfig};
use adhere_core::{Error, Result};

/// Exit status when a requested check fails.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for runtime errors (bad data, unreadable files).
pub const EXIT_ERROR: u8 = 3;

/// Flags shared by every workflow that reads a config.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// Run config (TOML). Defaults reproduce the published setup.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Cohort CSV, overriding `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column-mapping TOML, overriding `data.mapping`.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Output directory, overriding `output`.
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
    /// Training seed, overriding `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            config.data.path = Some(d.clone());
        }
        if let Some(m) = &self.mapping {
            config.data.mapping = Some(m.clone());
        }
        if let Some(o) = &self.out {
            config.output.clone_from(o);
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Config and split of a finished `train` run.
pub fn load_run(run: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::load(&run.join(pipeline::CONFIG_FILE))?;
    config.data.splits = Some(run.join(pipeline::SPLITS_FILE));
    config.output = run.to_path_buf();
    Ok(config)
}

/// Every `.adhm` file under `<run>/models`, sorted by name.
pub fn run_artifacts(run: &Path) -> Result<Vec<PathBuf>> {
    let dir = run.join(pipeline::MODELS_DIR);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == adhere_core::artifact::EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Artifact(format!("no model artifacts in {}", dir.display())));
    }
    Ok(paths)
}

fn load_artifacts(paths: &[PathBuf], config: &RunConfig) -> Result<Vec<ModelArtifact>> {
    let hash = config.hash();
    paths
        .iter()
        .map(|p| {
            let a = ModelArtifact::load(p)?;
            if a.provenance.config_hash != hash {
                log::warn!("{} was trained under a different config", p.display());
            }
            Ok(a)
        })
        .collect()
}

fn report_checks(checks: &[Check]) -> u8 {
    for c in checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        0
    } else {
        EXIT_CHECK_FAILED
    }
}

pub fn ingest(args: &ConfigArgs) -> Result<u8> {
    let config = args.resolve()?;
    let data = pipeline::load_data(&config)?;
    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let path = out.join("cohort.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    write_cohort(&data.cohort, file)?;
    data.splits.write_sidecar(&out.join(pipeline::SPLITS_FILE))?;
    let withdrawn = data.cohort.records.iter().filter(|r| r.withdrawal_interval().is_some()).count();
    println!(
        "{} patients ({withdrawn} withdrew), {} test, {} folds; canonical copy at {}",
        data.cohort.len(),
        data.splits.test_ids().len(),
        data.splits.k,
        path.display()
    );
    Ok(0)
}

pub fn synth(config: &SynthConfig, out: &Path) -> Result<u8> {
    let cohort = generate(config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let file = std::fs::File::create(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_cohort(&cohort, file)?;
    println!("wrote {} synthetic patients to {}", cohort.len(), out.display());
    Ok(0)
}

pub fn train(args: &ConfigArgs, kinds: &[ModelKind], full: bool) -> Result<u8> {
    let config = args.resolve()?;
    let data = pipeline::load_data(&config)?;
    pipeline::write_run_header(&config.output, &config, &data)?;
    for &kind in kinds {
        let mut models = pipeline::train_folds(&config, &data, kind)?;
        if full {
            models.push(pipeline::train_model(&config, &data, kind, None)?);
        }
        for p in pipeline::write_models(&config.output, &models)? {
            println!("{}", p.display());
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub protocols: Vec<Protocol>,
    /// Compare against the published one-step figures.
    pub check_reference: bool,
    /// Fail when any pooled RMSE exceeds this.
    pub max_rmse: Option<f64>,
    /// Fail when any one-step accuracy at steps 2..=5 falls below this.
    pub min_accuracy: Option<f64>,
}

pub fn eval(run: &Path, opts: &EvalOptions) -> Result<u8> {
    let config = load_run(run)?;
    let data = pipeline::load_data(&config)?;
    let artifacts = load_artifacts(&run_artifacts(run)?, &config)?;
    let fold_models: Vec<ModelArtifact> = artifacts.into_iter().filter(|a| a.provenance.fold.is_some()).collect();
    let result = pipeline::evaluate(&config, &data, &fold_models, &opts.protocols)?;
    let histogram = score_histogram(
        &data.cohort.records.iter().collect::<Vec<_>>(),
        &data.cohort.feature_names.scores,
        config.data.use_post_withdrawal_scores,
    )?;
    let dir = run.join(pipeline::REPORT_DIR);
    for p in emit_report(&dir, &result, &histogram)? {
        println!("{}", p.display());
    }

    let kinds: Vec<String> = fold_models.iter().map(|a| a.model.kind().to_string()).collect();
    let mut checks = Vec::new();
    if opts.check_reference {
        let table = &result.table;
        if kinds.iter().any(|k| k == "slvm") {
            checks.push(criteria::check_series("slvm accuracy", table, "slvm", Metric::Accuracy, &criteria::SLVM_ACCURACY, criteria::ACCURACY_TOLERANCE));
            checks.push(criteria::check_rmse_envelope("slvm rmse", table, "slvm", criteria::SLVM_RMSE_RANGE, criteria::RMSE_MARGIN));
        }
        if kinds.iter().any(|k| k == "lstm") {
            checks.push(criteria::check_series("lstm accuracy", table, "lstm", Metric::Accuracy, &criteria::LSTM_ACCURACY, criteria::ACCURACY_TOLERANCE));
            checks.push(criteria::check_series("lstm f1", table, "lstm", Metric::F1, &criteria::LSTM_F1, criteria::F1_TOLERANCE));
            checks.push(criteria::check_rmse_envelope("lstm rmse", table, "lstm", criteria::LSTM_RMSE_RANGE, criteria::RMSE_MARGIN));
        }
    }
    for kind in kinds.iter().collect::<std::collections::BTreeSet<_>>() {
        if let Some(limit) = opts.max_rmse {
            let worst = result
                .table
                .rows
                .iter()
                .filter(|r| &r.key.model == kind && r.key.metric == Metric::Rmse && r.key.feature == adhere_core::eval::ALL_FEATURES)
                .map(|r| r.mean)
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check {
                name: format!("{kind} max rmse"),
                passed: worst <= limit,
                detail: format!("worst {worst:.3} vs limit {limit}"),
            });
        }
        if let Some(limit) = opts.min_accuracy {
            let acc = criteria::one_step_series(&result.table, kind, Metric::Accuracy);
            let worst = acc.iter().skip(1).copied().fold(f64::INFINITY, f64::min);
            checks.push(Check {
                name: format!("{kind} min accuracy"),
                passed: worst >= limit,
                detail: format!("worst of steps 2-5 {worst:.3} vs limit {limit}"),
            });
        }
    }
    Ok(report_checks(&checks))
}

pub fn simulate(run: &Path, check: bool) -> Result<u8> {
    let config = load_run(run)?;
    let data = pipeline::load_data(&config)?;
    let artifacts = load_artifacts(&run_artifacts(run)?, &config)?;
    let folds: Vec<ModelArtifact> = artifacts.into_iter().filter(|a| a.provenance.fold.is_some()).collect();
    let effects = pipeline::simulator_effect(&config, &data, &folds)?;
    let path = run.join(pipeline::SIMULATION_FILE);
    pipeline::write_effects(&path, &effects)?;
    for e in &effects {
        println!(
            "fold {}: treat {:.4} stop {:.4} delta {:.4} over {} patients",
            e.fold.map_or("full".into(), |f| f.to_string()),
            e.treat_mean,
            e.stop_mean,
            e.delta,
            e.patients
        );
    }
    println!("{}", path.display());
    if check {
        let deltas: Vec<f64> = effects.iter().map(|e| e.delta).collect();
        return Ok(report_checks(&[criteria::check_simulator_effect("simulator effect", &deltas)]));
    }
    Ok(0)
}

pub fn attribute(run: &Path, artifact: Option<&Path>, target: Target, check: bool) -> Result<u8> {
    let config = load_run(run)?;
    let data = pipeline::load_data(&config)?;
    let path = match artifact {
        Some(p) => p.to_path_buf(),
        None => {
            let full = pipeline::artifact_path(run, ModelKind::Slvm, None);
            if full.exists() {
                full
            } else {
                pipeline::artifact_path(run, ModelKind::Slvm, Some(0))
            }
        }
    };
    let a = load_artifacts(&[path], &config)?.remove(0);
    let (results, ranking) = pipeline::attribute(&config, &data, &a, target)?;
    let out = run.join(pipeline::IMPORTANCE_FILE);
    let file = std::fs::File::create(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_importance(&ranking, file)?;
    let worst = results.iter().map(|r| r.residual).fold(0.0, f64::max);
    for f in ranking.iter().take(5) {
        println!("{:>2}. {:<20} mean|IG| {:.5}", f.rank, f.feature, f.mean_abs);
    }
    println!("largest completeness residual {worst:.2e}; {}", out.display());
    if check {
        let name = a
            .provenance
            .feature_names
            .statics
            .get(DISTANCE_FEATURE)
            .cloned()
            .unwrap_or_else(|| DEFAULT_STATIC_NAMES[DISTANCE_FEATURE].to_string());
        return Ok(report_checks(&[criteria::check_feature_rank("distance rank", &ranking, &name, 2)]));
    }
    Ok(0)
}
