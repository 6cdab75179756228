use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dualvq::experiment::{
    self, grid_threads, load_config, ExperimentConfig, Split, TrainOptions, Which,
};
use dualvq::Error;

#[derive(Parser)]
#[command(name = "dualvq", version, about = "Dual-codebook VQ autoencoder: train, evaluate, ablate, export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run.
    Train {
        /// TOML experiment file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total step budget (overrides `train.steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the configuration changed.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on its validation or test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Metrics JSON path; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every grid entry of a config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write one codebook of a checkpoint as a codebook dump.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Global,
    Local,
}

fn configure(
    path: Option<&PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    steps: Option<u64>,
) -> dualvq::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(n) = steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> dualvq::Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> dualvq::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            steps,
            resume,
            force,
        } => {
            let cfg = configure(config.as_ref(), seed, out, steps)?;
            let summary = experiment::run_train(&cfg, &TrainOptions { resume, force })?;
            println!("{}", json(&summary.last_eval)?);
        }
        Command::Eval { checkpoint, split, out } => {
            let split = match split {
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let file = experiment::run_eval(&checkpoint, split, out.as_deref())?;
            if out.is_none() {
                println!("{}", json(&file)?);
            }
        }
        Command::Ablate {
            config,
            seed,
            out,
            steps,
        } => {
            let cfg = configure(Some(&config), seed, out, steps)?;
            let rows = experiment::run_ablation(&cfg, grid_threads()?)?;
            println!("{}", json(&rows)?);
        }
        Command::Export { checkpoint, which, out } => {
            let which = match which {
                WhichArg::Global => Which::Global,
                WhichArg::Local => Which::Local,
            };
            let cb = experiment::export_codebook(&checkpoint, which, &out)?;
            println!("K={} d={} assignments={}", cb.len(), cb.dim(), cb.usage().total());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ResumeMismatch { .. } => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
