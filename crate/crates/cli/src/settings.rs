//! Flag, config-file and default merging.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use saywf::detect::PipelineConfig;
use saywf::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Selu,
    Relu,
}

impl ActivationArg {
    pub fn name(self) -> &'static str {
        match self {
            ActivationArg::Selu => "selu",
            ActivationArg::Relu => "relu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

/// Settings shared by every subcommand. Each may come from a flag or the
/// config file; flags win.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    /// Config file of `key = value` lines using these flag names with underscores.
    #[arg(long, global = true, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Root seed for all randomness [default: 42].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory [default: out].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset directory holding annotations.jsonl, or the file itself.
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// First frame of the dataset to use [default: 0].
    #[arg(long, global = true)]
    pub first: Option<usize>,
    /// Number of frames to use [default: all after --first].
    #[arg(long, global = true)]
    pub count: Option<usize>,
    #[arg(long = "weights-z", global = true, value_name = "FILE")]
    pub weights_z: Option<PathBuf>,
    #[arg(long = "weights-p", global = true, value_name = "FILE")]
    pub weights_p: Option<PathBuf>,
    #[arg(long, global = true)]
    pub stride: Option<u32>,
    #[arg(long = "tau-z", global = true)]
    pub tau_z: Option<f64>,
    #[arg(long = "tau-p", global = true)]
    pub tau_p: Option<f64>,
    #[arg(long, global = true)]
    pub window: Option<u32>,
    #[arg(long = "nms-iou", global = true)]
    pub nms_iou: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, global = true, value_enum)]
    pub bn: Option<Switch>,
}

impl Overrides {
    /// Fills every unset field from `other`.
    fn or(self, other: Overrides) -> Overrides {
        Overrides {
            config: self.config.or(other.config),
            seed: self.seed.or(other.seed),
            threads: self.threads.or(other.threads),
            out: self.out.or(other.out),
            data: self.data.or(other.data),
            first: self.first.or(other.first),
            count: self.count.or(other.count),
            weights_z: self.weights_z.or(other.weights_z),
            weights_p: self.weights_p.or(other.weights_p),
            stride: self.stride.or(other.stride),
            tau_z: self.tau_z.or(other.tau_z),
            tau_p: self.tau_p.or(other.tau_p),
            window: self.window.or(other.window),
            nms_iou: self.nms_iou.or(other.nms_iou),
            activation: self.activation.or(other.activation),
            bn: self.bn.or(other.bn),
        }
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub first: usize,
    pub count: Option<usize>,
    pub weights_z: Option<PathBuf>,
    pub weights_p: Option<PathBuf>,
    pub activation: String,
    pub batchnorm: bool,
    pub pipeline: PipelineConfig,
}

pub const DEFAULT_SEED: u64 = 42;

fn read_config(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Precedence: flags, then config file, then built-in defaults.
pub fn resolve(flags: Overrides) -> Result<Settings> {
    let file = match &flags.config {
        Some(p) => read_config(p)?,
        None => Overrides::default(),
    };
    let o = flags.or(file);
    let base = PipelineConfig::default();
    let pipeline = PipelineConfig {
        stride: o.stride.unwrap_or(base.stride),
        tau_z: o.tau_z.unwrap_or(base.tau_z),
        tau_p: o.tau_p.unwrap_or(base.tau_p),
        window: o.window.unwrap_or(base.window),
        nms_iou: o.nms_iou.unwrap_or(base.nms_iou),
        ..base
    };
    pipeline.validate()?;
    let threads = o
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(Settings {
        seed: o.seed.unwrap_or(DEFAULT_SEED),
        threads,
        out: o.out.unwrap_or_else(|| PathBuf::from("out")),
        data: o.data,
        first: o.first.unwrap_or(0),
        count: o.count,
        weights_z: o.weights_z,
        weights_p: o.weights_p,
        activation: o.activation.unwrap_or(ActivationArg::Selu).name().to_string(),
        batchnorm: o.bn == Some(Switch::On),
        pipeline,
    })
}
