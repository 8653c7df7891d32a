//! `arz`: simulate the ARZ plant, run the boundary observer, aggregate
//! trajectories and calibrate the fundamental diagram.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use arz_core::Units;
use clap::{Parser, Subcommand, ValueEnum};

use commands::{DataError, Out};
use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "arz", version, about = "ARZ traffic simulation and boundary observer")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; baseline defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Units of densities, speeds and flows in the config and measurement files.
    #[arg(long, global = true, value_enum)]
    units: Option<UnitsArg>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the plant and write its trajectory and boundary measurements.
    Simulate,
    /// Run the observer: twin experiment, trajectory data or a measurement file.
    Observe,
    /// Edie aggregation of trajectory data.
    Aggregate,
    /// Fit the flow curve and scan relaxation times.
    Calibrate,
    /// Write the output injection gains.
    Gains,
    /// Compare trajectory-data averages with expected values.
    Validate,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitsArg {
    Si,
    Traffic,
}

fn load(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::baseline(),
    };
    if let Some(u) = cli.units {
        cfg.units = match u {
            UnitsArg::Si => Units::Si,
            UnitsArg::Traffic => Units::Traffic,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = load(cli)?;
    let out = Out::new(&cli.out)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Observe => commands::observe(&cfg, &out),
        Command::Aggregate => commands::aggregate(&cfg, &out),
        Command::Calibrate => commands::calibrate(&cfg, &out),
        Command::Gains => commands::gains(&cfg, &out),
        Command::Validate => commands::validate(&cfg, &out),
    }
}

/// 2 config, 3 numerical blow-up, 4 data, 1 anything else (e.g. output I/O).
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<arz_core::Error>() {
            return match c {
                _ if c.is_numerical() => 3,
                _ if c.is_data() => 4,
                arz_core::Error::Calibration { .. } | arz_core::Error::CalibrationInvalid(_) | arz_core::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
