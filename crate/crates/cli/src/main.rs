#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{Ctx, UsageError};
use config::{ConfigError, RunConfig};

/// Grid-based PM2.5 forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "plumecast", version)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config `seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Omit timestamps so outputs are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a plume and sample virtual sensors: writes truth/ frames and sensors.csv.
    Synth,
    /// Resample raw readings into per-node bucket series.
    Ingest {
        /// CSV of node_id,lat,lon,timestamp,pm25.
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
    },
    /// Aggregate readings into gridded heat-map frames and a geography map.
    Rasterize {
        #[arg(long, value_name = "PATH")]
        records: PathBuf,
    },
    /// Train a grid model on a frames directory.
    Train {
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        /// Geography map frame; defaults to geography.csv in the frames directory.
        #[arg(long, value_name = "PATH")]
        geography: Option<PathBuf>,
    },
    /// Forecast frames following the newest frames in a directory.
    Predict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long, value_name = "H")]
        horizon: Option<usize>,
    },
    /// Per-horizon metrics table for one model at every noise level.
    Eval {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long, value_name = "H")]
        horizons: Option<usize>,
        /// Skip the training share of the frames.
        #[arg(long)]
        test_only: bool,
    },
    /// Mean NRMSE of several models across noise levels.
    Robustness {
        #[arg(long, value_name = "PATH", num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long)]
        test_only: bool,
    },
    /// Full comparison report of several models plus persistence.
    Compare {
        #[arg(long, value_name = "PATH", num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long)]
        test_only: bool,
    },
    /// Truth, prediction and error graymaps for one evaluation sequence.
    ExportMaps {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        frames: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long)]
        test_only: bool,
    },
    /// Print a configuration template with every key and its default.
    ConfigTemplate,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<plumecast::Error>() {
            return if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.unwrap_or_else(|| cfg.u64("seed")),
        cfg,
        deterministic: cli.deterministic,
        out: cli.out,
    };
    match &cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Ingest { records } => commands::ingest(&ctx, records),
        Command::Rasterize { records } => commands::rasterize(&ctx, records),
        Command::Train { frames, geography } => commands::train(&ctx, frames, geography.as_deref()),
        Command::Predict { model, frames, horizon } => commands::predict(&ctx, model, frames, *horizon),
        Command::Eval {
            model,
            frames,
            horizons,
            test_only,
        } => commands::eval(&ctx, model, frames, *horizons, *test_only),
        Command::Robustness {
            models,
            frames,
            test_only,
        } => commands::robustness(&ctx, models, frames, *test_only),
        Command::Compare {
            models,
            frames,
            test_only,
        } => commands::compare(&ctx, models, frames, *test_only),
        Command::ExportMaps {
            model,
            frames,
            sequence,
            test_only,
        } => commands::export_maps(&ctx, model, frames, *sequence, *test_only),
        Command::ConfigTemplate => {
            print!("{}", RunConfig::template());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
