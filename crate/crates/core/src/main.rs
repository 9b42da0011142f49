use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sphere_laplace::harness::checkpoint::Checkpoint;
use sphere_laplace::harness::config::RunConfig;
use sphere_laplace::harness::data::{load_dataset, save_dataset};
use sphere_laplace::harness::pipeline;
use sphere_laplace::harness::verify::{run_all, VerifyConfig};
use sphere_laplace::laplace::GaussianPosterior;
use sphere_laplace::{Error, Result};

#[derive(Parser)]
#[command(name = "sphere-laplace", version, about = "Bayesian metric learning with the Laplace approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic blob datasets (train.csv, test.csv, ood.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic contrastive training; writes a MAP checkpoint.
    TrainMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a post-hoc Laplace posterior around a MAP checkpoint.
    LaplacePosthoc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online Laplace training; writes a posterior checkpoint.
    TrainOnline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stochastic embeddings and concentration estimates per item.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieval and calibration report; `--train` is the retrieval index.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Out-of-distribution detection report.
    OodEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the derivative, PSD and equivalence checks.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn require_posterior(ckpt: Checkpoint) -> Result<GaussianPosterior> {
    match ckpt {
        Checkpoint::Posterior { posterior, .. } => Ok(posterior),
        Checkpoint::Map { .. } => Err(Error::Checkpoint("expected a posterior checkpoint, found a MAP one".into())),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let sets = pipeline::generate_data(&cfg)?;
            std::fs::create_dir_all(&out)?;
            save_dataset(&sets.train, &out.join("train.csv"))?;
            save_dataset(&sets.test, &out.join("test.csv"))?;
            save_dataset(&sets.ood, &out.join("ood.csv"))?;
        }
        Command::TrainMap { common, train, out } => {
            let cfg = load_config(&common)?;
            let params = pipeline::train_map(&cfg, &load_dataset(&train)?)?;
            Checkpoint::Map { spec: cfg.net.clone(), params, config_hash: cfg.hash() }.save(&out)?;
        }
        Command::LaplacePosthoc { common, train, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let params = match load_checkpoint(&checkpoint)? {
                Checkpoint::Map { params, .. } => params,
                Checkpoint::Posterior { posterior, .. } => posterior.params,
            };
            let posterior = pipeline::fit_posthoc(&cfg, &params, &load_dataset(&train)?)?;
            Checkpoint::Posterior { posterior, config_hash: cfg.hash() }.save(&out)?;
        }
        Command::TrainOnline { common, train, out } => {
            let cfg = load_config(&common)?;
            let result = pipeline::train_online(&cfg, &load_dataset(&train)?)?;
            Checkpoint::Posterior { posterior: result.posterior, config_hash: cfg.hash() }.save(&out)?;
        }
        Command::Embed { common, checkpoint, input, out } => {
            let cfg = load_config(&common)?;
            let posterior = require_posterior(load_checkpoint(&checkpoint)?)?;
            let items = pipeline::stochastic_embeddings(&cfg, &posterior, &load_dataset(&input)?)?;
            write_json(&items, out.as_deref())?;
        }
        Command::Eval { common, checkpoint, train, test, out } => {
            let cfg = load_config(&common)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (index, queries) = (load_dataset(&train)?, load_dataset(&test)?);
            let hash = ckpt.config_hash().to_string();
            let mut evaluation = match ckpt {
                Checkpoint::Map { params, .. } => pipeline::evaluate_map(&cfg, &hash, &params, &index, &queries)?,
                Checkpoint::Posterior { posterior, .. } => {
                    pipeline::evaluate_posterior(&cfg, &hash, &posterior, &index, &queries)?
                }
            };
            evaluation.report.stamp();
            write_json(&evaluation, out.as_deref())?;
        }
        Command::OodEval { common, checkpoint, test, ood, out } => {
            let cfg = load_config(&common)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let hash = ckpt.config_hash().to_string();
            let posterior = require_posterior(ckpt)?;
            let mut evaluation =
                pipeline::ood_evaluate(&cfg, &hash, &posterior, &load_dataset(&test)?, &load_dataset(&ood)?)?;
            evaluation.report.stamp();
            write_json(&evaluation, out.as_deref())?;
        }
        Command::Verify { seed, out } => {
            let cfg = VerifyConfig { seed: seed.unwrap_or(0), ..VerifyConfig::default() };
            let outcomes = run_all(&cfg)?;
            for o in &outcomes {
                println!("{o}");
            }
            if let Some(path) = out {
                write_json(&outcomes, Some(&path))?;
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
