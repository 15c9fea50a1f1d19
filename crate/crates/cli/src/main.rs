//! `pyraflow`: synthetic data generation, training, inference, evaluation,
//! benchmarking and visualization for the pyramid flow model.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure. Results go to stdout as JSON, progress to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use pyraflow_core::{parallel, Error, ErrorKind};

use commands::EvalSource;

#[derive(Parser)]
#[command(
    name = "pyraflow",
    version,
    about = "Coarse-to-fine optical flow on synthetic articulated motion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the flow between two PPM frames.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a directory of `.flo` predictions.
    #[command(group(ArgGroup::new("source").required(true).args(["ckpt", "pred"])))]
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time inference.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        /// Also time with internal parallelism enabled.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a `.flo` file with the color wheel.
    Viz {
        #[arg(long)]
        flo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_norm: Option<f32>,
    },
}

/// Size the worker pool from `PYRAFLOW_THREADS` (default: all cores).
fn setup_threads() -> Result<(), Error> {
    let threads = match std::env::var("PYRAFLOW_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "PYRAFLOW_THREADS must be a positive integer, got {v:?}"
                ))
            })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // Ignore the error if a pool already exists; the cap is best effort.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    parallel::set_enabled(threads > 1);
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    setup_threads()?;
    match command {
        Command::Gen { config, out } => commands::gen(&config, &out),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Infer {
            ckpt,
            img1,
            img2,
            out,
        } => commands::infer(&ckpt, &img1, &img2, &out),
        Command::Eval {
            ckpt,
            pred,
            data,
            csv,
            config,
        } => {
            let source = match (ckpt, pred) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => unreachable!("clap requires one source"),
            };
            commands::eval(&source, &data, csv.as_deref(), config.as_deref())
        }
        Command::Bench {
            ckpt,
            warmup,
            iters,
            parallel,
            config,
        } => commands::bench(&ckpt, warmup, iters, parallel, config.as_deref()),
        Command::Viz { flo, out, max_norm } => commands::viz(&flo, &out, max_norm),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", e.render());
            eprintln!("error: usage: {}", e.kind());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.tag(), e.to_string().replace('\n', " "));
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
