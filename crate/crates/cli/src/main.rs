use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vibloc::runner::{self, Overrides, RunConfig};

/// Variational information bottleneck indoor positioning from WiFi RSSI
/// fingerprints.
#[derive(Debug, Parser)]
#[command(name = "vibloc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Data CSV, preprocessed cache, or a directory holding trainingData.csv.
    /// Defaults to $VIB_DATA_DIR.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    beta: Option<f64>,

    #[arg(long, global = true)]
    latent_dim: Option<usize>,

    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    batch_size: Option<usize>,

    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Latent samples averaged at inference.
    #[arg(long, global = true)]
    mc_samples_eval: Option<usize>,

    /// Comma-separated labeled fractions.
    #[arg(long, global = true, value_delimiter = ',')]
    fraction_grid: Option<Vec<f64>>,

    /// Comma-separated KL weights.
    #[arg(long, global = true, value_delimiter = ',')]
    beta_grid: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a CSV and write the preprocessed cache.
    Ingest {
        /// Cache file to write (default: <out>/dataset.cache).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint, epoch log and result CSV.
    Train {
        /// Continue from the training state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the held-out split it was trained against.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train one model per (beta, seed).
    SweepBeta,
    /// Train VIB and k-NN on labeled subsamples of the training split.
    SweepFraction,
    /// Export a 2-D PCA projection of the latent means.
    ProjectLatent {
        #[arg(long)]
        model: PathBuf,
    },
    /// Tuned k-NN baseline on the same split.
    BaselineKnn,
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&Overrides {
        data_path: common.data.clone(),
        output_dir: common.out.clone(),
        seed: common.seed,
        beta: common.beta,
        latent_dim: common.latent_dim,
        max_epochs: common.epochs,
        batch_size: common.batch_size,
        jobs: common.jobs,
        eval_mc_samples: common.mc_samples_eval,
        fractions: common.fraction_grid.clone(),
        betas: common.beta_grid.clone(),
    });
    if cfg.data_path.is_none() {
        cfg.data_path = std::env::var_os("VIB_DATA_DIR").map(PathBuf::from);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Ingest { cache } => {
            let data = cfg.data_file()?;
            let cache = cache.unwrap_or_else(|| cfg.out("dataset.cache"));
            let report = runner::ingest(&data, &cache)?;
            println!("{}", report.render());
            println!("cache written to {}", cache.display());
        }
        Command::Train { resume } => {
            let r = runner::train_command(&cfg, resume)?;
            println!(
                "trained {} epochs ({} steps), best epoch {}",
                r.outcome.log.len(),
                r.outcome.steps,
                r.outcome.best_epoch
            );
            println!("final val rmse: {:?}", r.outcome.best_val_rmse);
            println!("test rmse: {:?}", r.test_rmse);
            println!("checkpoint: {}", r.checkpoint.display());
            println!("epoch log: {}", r.epoch_log.display());
            println!("results: {}", r.results.display());
        }
        Command::Evaluate { model } => {
            let data = cfg.data_file()?;
            let r = runner::evaluate_command(&model, &data)
                .with_context(|| format!("evaluating {}", model.display()))?;
            println!("test rows: {}", r.rows);
            println!("test rmse: {:?}", r.rmse);
        }
        Command::SweepBeta => {
            let (res, path) = runner::sweep_beta_command(&cfg)?;
            for a in res.aggregates() {
                println!(
                    "beta {:e}: mean rmse {:?} over {} runs",
                    a.beta, a.mean_rmse, a.finite_runs
                );
            }
            match res.best_beta() {
                Some(b) => println!("best beta: {b:e}"),
                None => println!("best beta: none (every run diverged)"),
            }
            println!("results: {}", path.display());
        }
        Command::SweepFraction => {
            let (res, path) = runner::sweep_fraction_command(&cfg)?;
            for a in res.aggregates() {
                println!(
                    "fraction {:?} {}: mean rmse {:?} over {} runs",
                    a.fraction, a.arm, a.mean_rmse, a.finite_runs
                );
            }
            println!("results: {}", path.display());
        }
        Command::ProjectLatent { model } => {
            let (proj, path) = runner::project_latent_command(&cfg, &model)?;
            if proj.fallback {
                println!("degenerate latent covariance: wrote the first two latent dimensions");
            }
            println!("projected {} rows, variance {:?}", proj.points.rows(), proj.variance);
            println!("projection: {}", path.display());
        }
        Command::BaselineKnn => {
            let r = runner::baseline_knn_command(&cfg)?;
            println!("k: {}", r.k);
            println!("test rmse: {:?}", r.rmse);
            println!("results: {}", r.results.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
