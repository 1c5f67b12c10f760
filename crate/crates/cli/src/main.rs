use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use adhere_cli::commands::{self, ConfigArgs, EvalOptions, EXIT_ERROR};
use adhere_cli::server::{self, AppState, Snapshot};
use adhere_core::attribution::Target;
use adhere_core::config::ModelKind;
use adhere_core::eval::Protocol;
use adhere_core::synth::SynthConfig;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adhere", version, about = "Treatment adherence and outcome models for allergy immunotherapy cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a cohort, write its canonical copy and the split sidecar.
    Ingest {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Write a synthetic cohort in the canonical format.
    Synth {
        #[arg(long, default_value_t = 205)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short = 'o', default_value = "synthetic.csv")]
        out: PathBuf,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Model kinds to train; defaults to the config's `model`.
        #[arg(long, short = 'm', value_delimiter = ',')]
        model: Vec<ModelKind>,
        /// Also fit one model on all training patients.
        #[arg(long)]
        full: bool,
    },
    /// Score the fold models of a run on the held-out test set.
    Eval {
        /// Directory written by `train`.
        #[arg(long, short = 'r')]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "one_step,rollout")]
        protocol: Vec<Protocol>,
        /// Compare one-step results with the published reference figures.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        max_rmse: Option<f64>,
        #[arg(long)]
        min_accuracy: Option<f64>,
    },
    /// Treat-versus-stop comparison from visit 3 for each fold model.
    Simulate {
        #[arg(long, short = 'r')]
        run: PathBuf,
        /// Require a negative, stable, sub-unit effect.
        #[arg(long)]
        check: bool,
    },
    /// Rank static features by integrated gradients.
    Attribute {
        #[arg(long, short = 'r')]
        run: PathBuf,
        /// Artifact to explain; defaults to the run's full or first fold model.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long, default_value = "mean_adherence")]
        target: Target,
        /// Require the distance feature among the top two.
        #[arg(long)]
        check: bool,
    },
    /// Serve predictions and what-if scenarios over HTTP.
    Serve {
        /// Artifact files; one per model kind.
        #[arg(long, short = 'm', required_unless_present = "run")]
        models: Vec<PathBuf>,
        /// Serve the full models (or first folds) of a run instead.
        #[arg(long, short = 'r', conflicts_with = "models")]
        run: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn run_models(run: &std::path::Path) -> Vec<PathBuf> {
    use adhere_core::pipeline::artifact_path;
    [ModelKind::Slvm, ModelKind::Lstm]
        .into_iter()
        .filter_map(|k| {
            [artifact_path(run, k, None), artifact_path(run, k, Some(0))]
                .into_iter()
                .find(|p| p.exists())
        })
        .collect()
}

fn dispatch(command: Command) -> adhere_core::Result<u8> {
    match command {
        Command::Ingest { args } => commands::ingest(&args),
        Command::Synth { patients, seed, out } => {
            let config = SynthConfig {
                patients,
                seed,
                ..SynthConfig::default()
            };
            commands::synth(&config, &out)
        }
        Command::Train { args, model, full } => {
            let kinds = if model.is_empty() {
                vec![args.resolve()?.model]
            } else {
                model
            };
            commands::train(&args, &kinds, full)
        }
        Command::Eval {
            run,
            protocol,
            check,
            max_rmse,
            min_accuracy,
        } => commands::eval(
            &run,
            &EvalOptions {
                protocols: protocol,
                check_reference: check,
                max_rmse,
                min_accuracy,
            },
        ),
        Command::Simulate { run, check } => commands::simulate(&run, check),
        Command::Attribute {
            run,
            artifact,
            target,
            check,
        } => commands::attribute(&run, artifact.as_deref(), target, check),
        Command::Serve { models, run, bind } => {
            let paths = match run {
                Some(r) => run_models(&r),
                None => models,
            };
            let state = AppState::new(Snapshot::load(&paths)?, paths);
            let rt = tokio::runtime::Runtime::new().map_err(|e| adhere_core::Error::Io {
                path: PathBuf::from(bind.to_string()),
                source: e,
            })?;
            log::info!("listening on {bind}");
            rt.block_on(server::serve(state, bind)).map_err(|e| adhere_core::Error::Io {
                path: PathBuf::from(bind.to_string()),
                source: e,
            })?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
