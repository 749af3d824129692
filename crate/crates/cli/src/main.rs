//! Batch command surface for the closure-modeling pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure.

use clap::{Parser, Subcommand, ValueEnum};
use niles_cli::commands;
use niles_cli::config::RunConfig;
use niles_model::closure::ClosureMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "niles", version, about = "Spectral-element LES closure pipeline")]
struct Cli {
    /// Override the relevant seed of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for trajectory-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Niles,
    Deterministic,
}

impl From<ModelKind> for ClosureMode {
    fn from(m: ModelKind) -> ClosureMode {
        match m {
            ModelKind::Niles => ClosureMode::Niles,
            ModelKind::Deterministic => ClosureMode::Deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the filtered-DNS dataset described by the config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a closure model on an existing dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory (holds manifest.json and the shards).
        data: PathBuf,
    },
    /// Roll out a trained model (and baselines) on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Also run the implicit-LES and no-closure baselines.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory of the trained model.
        checkpoint: PathBuf,
        /// Dataset directory.
        data: PathBuf,
    },
    /// Check every dataset shard against the manifest checksums.
    Verify {
        /// Dataset directory.
        data: PathBuf,
    },
    /// Time-averaged TKE spectrum of the filtered-DNS test split.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory.
        data: PathBuf,
    },
}

fn is_numerical(err: &anyhow::Error) -> bool {
    use niles_model::ModelError;
    use niles_solver::SolverError;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SolverError>() {
            match e {
                SolverError::CgBreakdown { .. }
                | SolverError::CgNoConvergence { .. }
                | SolverError::NonFinite(_)
                | SolverError::StepFailed { .. } => return true,
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            match e {
                ModelError::NonFinite(_) | ModelError::TrainingAborted { .. } => return true,
                _ => {}
            }
        }
    }
    false
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    match cli.cmd {
        Cmd::Generate { config, out, force } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.dataset.base_seed = s;
            }
            commands::cmd_generate(&cfg, &out, force)
        }
        Cmd::Train {
            config,
            model,
            out,
            resume,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_train(&cfg, model.into(), &data, &out, resume.as_deref(), cli.seed)
        }
        Cmd::Evaluate {
            config,
            steps,
            baselines,
            out,
            checkpoint,
            data,
        } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            commands::cmd_evaluate(&cfg, &checkpoint, &data, steps, baselines, &out, seed)
                .map(|_| ())
        }
        Cmd::Verify { data } => commands::cmd_verify(&data),
        Cmd::Spectrum { config, out, data } => {
            let cfg = RunConfig::load(&config)?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            commands::cmd_spectrum(&cfg, &data, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_numerical(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
