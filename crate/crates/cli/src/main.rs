mod commands;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use saywf::Error;

use crate::settings::Overrides;

#[derive(Parser, Debug)]
#[command(name = "saywf", version, about = "Seek-and-find pedestrian detection: data, training, detection and evaluation")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic annotated dataset into --out.
    Synth {
        #[arg(long, default_value_t = 2000)]
        frames: usize,
        #[arg(long, default_value_t = 384)]
        width: u32,
        #[arg(long, default_value_t = 288)]
        height: u32,
    },
    /// Box size histograms, center density and resolution summary.
    Stats {
        #[arg(long, default_value_t = 2.0)]
        bin_width: f64,
    },
    /// Train the zone classifier on grid-cell crops.
    TrainZone {
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 720)]
        max_positive: usize,
        #[arg(long, default_value_t = 1296)]
        max_negative: usize,
    },
    /// Train the pedestrian classifier on detector-window crops.
    TrainPed {
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        negatives_per_frame: usize,
    },
    /// Collect the detector's false positives and retrain the pedestrian classifier with them.
    Mine {
        #[arg(long, default_value_t = 20)]
        per_frame: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        negatives_per_frame: usize,
    },
    /// Run the detector and write detections as JSON Lines.
    Detect,
    /// Detect and score against ground truth.
    Eval,
    /// Miss rate, windows and speed across strides.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![3u32, 5, 8, 12, 16])]
        strides: Vec<u32>,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Finite-difference gradient checks of every layer type.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Parameter counts of both classifiers against the reference tables.
    Paramcheck,
    /// Train SELU and ReLU variants on the same data and compare.
    CompareActivations {
        #[arg(long, default_value = "zone")]
        arch: String,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        probe: usize,
    },
}

/// 1 usage or configuration, 2 data, 3 numeric failure or failed check.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Unknown { .. } => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let settings = match settings::resolve(cli.overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    match commands::run(&cli.command, &settings) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
