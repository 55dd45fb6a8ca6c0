use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kinspec::codec::NormKey;
use kinspec::harness::{emit_results, load_labeled_traces, run_suite, run_sweep, sweep_text, RunConfig, SweepParam};
use kinspec::specdec::EngineMode;
use kinspec::threshold::{calibrate, CalibrationGrid};
use kinspec::{Error, Result};

#[derive(Parser)]
#[command(name = "kinspec", version, about = "Kinematic-rectified speculative decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured suites and write the report, traces and plot data.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run a single mode (the naive baseline still runs for speedups).
        #[arg(long)]
        mode: Option<EngineMode>,
        #[arg(long)]
        suite: Option<String>,
        /// Override the trial count of every suite.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a calibration table from a directory written by `run`.
    Calibrate {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// NormKey file the traces were decoded with.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        depth: usize,
    },
    /// Vary one hyperparameter and print pooled metrics per value.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>, trials: Option<usize>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = trials {
        config.suites.iter_mut().for_each(|s| s.trials = n);
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            mode,
            suite,
            trials,
            seed,
        } => {
            let mut config = load_config(config.as_ref(), trials)?;
            if let Some(m) = mode {
                config.modes = vec![m];
            }
            if let Some(s) = suite {
                config.select_suite(&s)?;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let output = run_suite(&config)?;
            emit_results(&output, &config.robot, &out)?;
            print!("{}", output.report.to_text());
        }
        Command::Calibrate {
            traces,
            grid,
            out,
            key,
            depth,
        } => {
            let key = key.map_or_else(|| Ok(NormKey::default()), NormKey::load)?;
            let grid = CalibrationGrid::load(&grid)?;
            let table = calibrate(&load_labeled_traces(&traces)?, &grid, &key, depth)?;
            table.save(&out)?;
            print!("{}", table.to_text());
        }
        Command::Sweep {
            param,
            values,
            config,
            trials,
            out,
        } => {
            let config = load_config(config.as_ref(), trials)?;
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Config(format!("bad --values entry `{}`: {e}", v.trim())))
                })
                .collect::<Result<Vec<_>>>()?;
            let text = sweep_text(param, &run_sweep(&config, param, &values)?);
            if let Some(path) = out {
                std::fs::write(&path, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kinspec: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
