use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::stream::GradientStreamSpec;
use super::{num, substream, ExperimentResult};
use crate::ema::{EmaConfig, EmaState, StallTrace, Storage};
use crate::error::{Error, Result};
use crate::minifloat::RoundingMode;
use crate::theory::{p_stall_nr_ss, p_stall_nr_transient, p_stall_sr_ss, rhohat};

/// A single EMA tensor driven by a gradient stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub stream: GradientStreamSpec,
    pub ema: EmaConfig,
    pub steps: u64,
    pub trials: u32,
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.ema.validate()?;
        if self.steps == 0 || self.trials == 0 {
            return Err(Error::usage("steps and trials must be at least 1"));
        }
        Ok(())
    }
}

/// Trial-averaged stalled fraction per step. `square` feeds `g^2` (second
/// moment) instead of `g` (first moment).
fn measure(cfg: &CurveConfig, square: bool) -> Result<Vec<f64>> {
    cfg.validate()?;
    let per_trial: Vec<Vec<f64>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut grads = substream(cfg.stream.seed, 2 * trial);
            let mut rounding = substream(cfg.stream.seed, 2 * trial + 1);
            let mut state = EmaState::zeros(cfg.stream.dimension, cfg.ema)?;
            let mut g = vec![0.0; cfg.stream.dimension];
            let mut fractions = Vec::with_capacity(cfg.steps as usize);
            for t in 1..=cfg.steps {
                cfg.stream.sample_into(t, &mut grads, &mut g);
                if square {
                    g.iter_mut().for_each(|x| *x *= *x);
                }
                fractions.push(state.step(&g, Some(&mut rounding))?);
            }
            Ok(fractions)
        })
        .collect::<Result<_>>()?;
    let n = per_trial.len() as f64;
    Ok((0..cfg.steps as usize)
        .map(|i| per_trial.iter().map(|f| f[i]).sum::<f64>() / n)
        .collect())
}

fn tail_mean(curve: &[f64], frac: f64) -> f64 {
    let n = ((curve.len() as f64 * frac).round() as usize).clamp(1, curve.len());
    curve[curve.len() - n..].iter().sum::<f64>() / n as f64
}

/// Whether the curve, averaged over consecutive `window`-step blocks, never
/// drops more than `tol` below its running maximum (starting from the
/// step-1 value) before first reaching `plateau - tol`.
pub fn monotone_rise(curve: &[f64], window: usize, plateau: f64, tol: f64) -> bool {
    let Some(&first) = curve.first() else {
        return true;
    };
    let mut best = first;
    for block in curve.chunks(window.max(1)) {
        let m = block.iter().sum::<f64>() / block.len() as f64;
        if m < best - tol {
            return false;
        }
        best = best.max(m);
        if m >= plateau - tol {
            return true;
        }
    }
    true
}

fn trace(id: &str, curve: &[f64]) -> StallTrace {
    let mut t = StallTrace::new(id);
    for (i, &f) in curve.iter().enumerate() {
        t.push(f, i as u64 + 1, false);
    }
    t
}

/// Second-moment stalled fraction versus step, with the closed-form overlay.
///
/// Summary keys: `floor` (step-1 fraction), `plateau` (mean over the last
/// 10% of steps), `rhohat`, `theory_plateau`, `plateau_gap`, `monotone_rise`.
/// The `theory` column is `floor + (1 - floor) P_trans(j)` under nearest
/// rounding and the steady-state value under stochastic rounding.
pub fn run_stall_curve(cfg: &CurveConfig) -> Result<ExperimentResult> {
    let start = std::time::Instant::now();
    let curve = measure(cfg, true)?;
    let floor = curve[0];
    let plateau = tail_mean(&curve, 0.1);
    let beta = cfg.ema.beta;
    let (rho, overlay): (f64, Box<dyn Fn(u64) -> f64>) = match cfg.ema.storage {
        Storage::Full => (0.0, Box::new(|_| 0.0)),
        Storage::Quantized { format, .. } => {
            let rho = rhohat(format.epsilon(), beta)?;
            match cfg.ema.rounding {
                RoundingMode::Nearest => (
                    rho,
                    Box::new(move |j| floor + (1.0 - floor) * p_stall_nr_transient(j, beta, rho)),
                ),
                RoundingMode::Stochastic => {
                    let p = p_stall_sr_ss(rho);
                    (rho, Box::new(move |_| p))
                }
            }
        }
    };
    let theory_plateau = match (cfg.ema.storage, cfg.ema.rounding) {
        (Storage::Full, _) => 0.0,
        (_, RoundingMode::Nearest) => p_stall_nr_ss(rho),
        (_, RoundingMode::Stochastic) => p_stall_sr_ss(rho),
    };

    let mut r = ExperimentResult::new("stall_curve", cfg, &["step", "stalled_fraction", "theory"])?;
    for (i, &f) in curve.iter().enumerate() {
        let j = i as u64 + 1;
        r.rows.push(vec![Value::from(j), num(f), num(overlay(j))]);
    }
    r.summary.insert("floor".into(), num(floor));
    r.summary.insert("plateau".into(), num(plateau));
    r.summary.insert("rhohat".into(), num(rho));
    r.summary
        .insert("theory_plateau".into(), num(theory_plateau));
    r.summary
        .insert("plateau_gap".into(), num(plateau - theory_plateau));
    r.summary.insert(
        "monotone_rise".into(),
        Value::from(monotone_rise(&curve, 50, plateau, 0.02)),
    );
    r.traces.push(trace("v", &curve));
    r.wall_time_s = start.elapsed().as_secs_f64();
    Ok(r)
}

/// First-moment stalled fraction versus step for a stream with mean `mu`.
/// There is no closed-form overlay. Summary keys: `floor`, `plateau`, `snr`.
pub fn run_first_moment_curve(cfg: &CurveConfig) -> Result<ExperimentResult> {
    if let Storage::Quantized { format, .. } = cfg.ema.storage {
        if !format.is_signed() {
            return Err(Error::usage(format!(
                "first-moment states need a signed format, got {}",
                format.name()
            )));
        }
    }
    let start = std::time::Instant::now();
    let curve = measure(cfg, false)?;
    let mut r = ExperimentResult::new("first_moment_curve", cfg, &["step", "stalled_fraction"])?;
    for (i, &f) in curve.iter().enumerate() {
        r.rows.push(vec![Value::from(i as u64 + 1), num(f)]);
    }
    r.summary.insert("floor".into(), num(curve[0]));
    r.summary
        .insert("plateau".into(), num(tail_mean(&curve, 0.1)));
    r.summary
        .insert("snr".into(), num(cfg.stream.mu() / cfg.stream.sigma_at(1)));
    r.traces.push(trace("m", &curve));
    r.wall_time_s = start.elapsed().as_secs_f64();
    Ok(r)
}
