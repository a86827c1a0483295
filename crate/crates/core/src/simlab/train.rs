use serde::{Deserialize, Serialize};

use super::problems::{ProblemRegistry, ProblemSpec};
use super::substream;
use crate::ema::{
    AdamHyper, AdamOptimizer, Moment, NoReset, ResetPolicy, ResetRegistry, ResetStrategy, Storage,
};
use crate::error::{Error, Result};
use crate::minifloat::{FpFormat, RoundingMode};
use crate::quantizer::ScalingScheme;

/// Training loop settings shared by the toy-problem studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub hyper: AdamHyper,
    /// Fraction of steps with linear learning-rate warmup. Interventions
    /// such as forced skips start after it.
    pub warmup_frac: f64,
    /// Cosine-decay the learning rate to this fraction after warmup; `1.0` keeps it flat.
    pub final_lr_frac: f64,
    /// Final loss is the mean training loss over this trailing fraction of steps.
    pub eval_frac: f64,
    /// Loss-curve sampling interval; `0` picks about 100 points.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            hyper: AdamHyper {
                lr: 0.01,
                ..AdamHyper::default()
            },
            warmup_frac: 0.1,
            final_lr_frac: 0.1,
            eval_frac: 0.1,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::usage("steps must be at least 1"));
        }
        for (name, v) in [
            ("warmup_frac", self.warmup_frac),
            ("final_lr_frac", self.final_lr_frac),
            ("eval_frac", self.eval_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.eval_frac == 0.0 {
            return Err(Error::usage("eval_frac must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_frac * self.steps as f64).round() as u64
    }

    /// Learning-rate multiplier at 1-based step `t`.
    pub fn lr_scale(&self, t: u64) -> f64 {
        let w = self.warmup_frac * self.steps as f64;
        let warm = if w > 0.0 {
            (t as f64 / w).min(1.0)
        } else {
            1.0
        };
        let span = self.steps as f64 - w;
        let progress = if span > 0.0 {
            ((t as f64 - w).max(0.0) / span).min(1.0)
        } else {
            1.0
        };
        let f = self.final_lr_frac;
        warm * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    fn eval_start(&self) -> u64 {
        let n = ((self.eval_frac * self.steps as f64).round() as u64).max(1);
        self.steps - n.min(self.steps) + 1
    }

    fn log_interval(&self) -> u64 {
        if self.log_every > 0 {
            self.log_every
        } else {
            (self.steps / 100).max(1)
        }
    }
}

/// Storage for Adam's two moments under a named precision preset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatePrecision {
    pub m: Storage,
    pub v: Storage,
}

impl StatePrecision {
    pub const PRESETS: [&'static str; 4] = ["full", "bf16", "fp8", "fp4"];

    /// `full` (f64), `bf16` (unscaled), `fp8` (E4M3, per-tensor scale) or
    /// `fp4` (E2M1 first moment, zero-free E2M2u second moment, 128-blocks).
    pub fn preset(name: &str) -> Result<Self> {
        let q = Storage::quantized;
        let both = |s: Storage| StatePrecision { m: s, v: s };
        Ok(match name {
            "full" | "fp32" => both(Storage::Full),
            "bf16" => both(q(FpFormat::BF16, ScalingScheme::UNSCALED)),
            "fp8" | "fp8_e4m3" => both(q(FpFormat::FP8_E4M3, ScalingScheme::PerTensor)),
            "fp4" => StatePrecision {
                m: q(
                    FpFormat::FP4_E2M1,
                    ScalingScheme::Blockwise { block_size: 128 },
                ),
                v: q(
                    FpFormat::FP4_E2M2U.with_exclude_zero(true),
                    ScalingScheme::Blockwise { block_size: 128 },
                ),
            },
            _ => {
                return Err(Error::Unknown {
                    kind: "precision preset",
                    name: name.to_string(),
                })
            }
        })
    }

    pub fn is_full(&self) -> bool {
        self.m == Storage::Full && self.v == Storage::Full
    }
}

/// What one training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_loss: f64,
    /// `(step, loss)` samples; step 0 is the initial point.
    pub loss_curve: Vec<(u64, f64)>,
    pub m_stalled_mean: f64,
    pub v_stalled_mean: f64,
    pub resets: u64,
    pub diverged: bool,
}

/// One training run's full description.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub problem: &'a ProblemSpec,
    pub train: &'a TrainConfig,
    pub precision: StatePrecision,
    pub rounding: RoundingMode,
    pub policy: &'a ResetPolicy,
    /// Forced skips on one moment after warmup.
    pub skip: Option<(Moment, f64)>,
    pub seed: u64,
}

fn strategies(policy: &ResetPolicy) -> Result<(Box<dyn ResetStrategy>, Box<dyn ResetStrategy>)> {
    let reg = ResetRegistry::default();
    let pick = |on: bool| -> Result<Box<dyn ResetStrategy>> {
        if on {
            reg.build(policy)
        } else {
            Ok(Box::new(NoReset))
        }
    };
    Ok((
        pick(policy.applies_to.first())?,
        pick(policy.applies_to.second())?,
    ))
}

pub fn train_run(spec: &RunSpec<'_>) -> Result<TrainOutcome> {
    let cfg = spec.train;
    cfg.validate()?;
    // problem data, gradient noise and optimizer randomness use separate
    // substreams, so arms sharing a seed see the same problem and noise
    let problem = ProblemRegistry::default().build(spec.problem, &mut substream(spec.seed, 0))?;
    let mut noise = substream(spec.seed, 1);
    let mut opt_rng = substream(spec.seed, 2);

    let (m_reset, v_reset) = strategies(spec.policy)?;
    let n = problem.dim();
    let mut opt = AdamOptimizer::new(
        n,
        cfg.hyper,
        spec.precision.m,
        spec.precision.v,
        spec.rounding,
    )?
    .with_resets(m_reset, v_reset);

    let mut x = problem.init();
    let mut g = vec![0.0; n];
    let warmup = cfg.warmup_steps();
    let eval_from = cfg.eval_start();
    let every = cfg.log_interval();
    let mut curve = vec![(0, problem.loss(&x))];
    let (mut eval_sum, mut eval_n) = (0.0, 0u64);
    let (mut m_sum, mut v_sum, mut resets) = (0.0, 0.0, 0u64);
    let mut diverged = false;

    for t in 1..=cfg.steps {
        if t == warmup + 1 {
            opt.set_skip(spec.skip)?;
        }
        problem.gradient(&x, &mut noise, &mut g);
        let st = opt.step(&mut x, &g, cfg.lr_scale(t), &mut opt_rng)?;
        m_sum += st.m_stalled;
        v_sum += st.v_stalled;
        resets += u64::from(st.v_reset || st.m_reset);

        let loss = problem.loss(&x);
        if !loss.is_finite() {
            diverged = true;
            curve.push((t, f64::INFINITY));
            break;
        }
        if t >= eval_from {
            eval_sum += loss;
            eval_n += 1;
        }
        if t % every == 0 || t == cfg.steps {
            curve.push((t, loss));
        }
    }
    let done = opt.steps().max(1) as f64;
    Ok(TrainOutcome {
        final_loss: if diverged {
            f64::INFINITY
        } else {
            eval_sum / eval_n as f64
        },
        loss_curve: curve,
        m_stalled_mean: m_sum / done,
        v_stalled_mean: v_sum / done,
        resets,
        diverged,
    })
}
