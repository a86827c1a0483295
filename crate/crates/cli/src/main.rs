mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{parse_seeds, Preset, Seeds};

/// Stall predictors and quantized-EMA experiments.
#[derive(Debug, Parser)]
#[command(name = "qema", version)]
pub struct Cli {
    /// Output directory. Experiments default to $QEMA_OUT_DIR, then ./qema-out;
    /// predictors write a file only when this is given.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Emit JSON instead of CSV.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON object whose keys override flags (keys use the flag names with underscores).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Steady-state stall probabilities under nearest and stochastic rounding.
    PredictStall(StallFlags),
    /// Startup window after a reset for each tolerance P0.
    PredictWindow(WindowFlags),
    /// Heuristic reset period for each tolerance s0.
    PredictPeriod(PeriodFlags),
    /// Monte Carlo second-moment stalled fraction versus step, with theory overlay.
    StallCurve(CurveFlags),
    /// Toy-problem training with forced skips of one Adam moment.
    SkipStudy(SkipFlags),
    /// Toy-problem final loss across state precisions and reset policies.
    ResetStudy(ResetFlags),
    /// Monte Carlo first-moment stalled fraction for a stream with nonzero mean.
    FirstMoment(CurveFlags),
}

#[derive(Debug, Args, Serialize)]
pub struct StallFlags {
    /// Formats: presets (bf16, fp8_e4m3, fp4_e2m1, fp4_e2m2u) or tags like s1e5m2b15.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct WindowFlags {
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    /// Stall-probability tolerances.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
    /// Initial floors, one per format.
    #[arg(long = "p-init", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_init: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct PeriodFlags {
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    /// Excess-staleness tolerances in [0, 1).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s0: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct CurveFlags {
    #[arg(long, value_enum)]
    #[serde(skip)]
    pub preset: Option<Preset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// auto, unscaled, per-tensor, block:<n> or fixed:<scale>.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    /// nr or sr.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounding: Option<String>,
    /// EMA decay.
    #[arg(long, alias = "beta2", alias = "beta1")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SkipFlags {
    #[arg(long, value_enum)]
    #[serde(skip)]
    pub preset: Option<Preset>,
    /// noisy_quadratic or synth_logistic.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Comma list or half-open range such as 0..5.
    #[arg(long, value_parser = parse_seeds)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
    #[arg(long = "p-skip", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_skip: Option<Vec<f64>>,
    /// first, second, or both as a list.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
}

#[derive(Debug, Args, Serialize)]
pub struct ResetFlags {
    #[arg(long, value_enum)]
    #[serde(skip)]
    pub preset: Option<Preset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s0: Option<f64>,
    #[arg(long, value_parser = parse_seeds)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
    /// State precision presets: full, bf16, fp8, fp4.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rounding: Option<Vec<String>>,
    /// none, kstar, periodic:<K> or adaptive.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<String>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                qema::Error::Usage(_) | qema::Error::Unknown { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
