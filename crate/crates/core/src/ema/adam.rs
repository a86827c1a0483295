use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EmaConfig, EmaState, NoReset, ResetStrategy, Storage};
use crate::error::{Error, Result};
use crate::minifloat::RoundingMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Use `sqrt(v_hat + eps)` instead of `sqrt(v_hat) + eps`.
    pub eps_inside_sqrt: bool,
    /// Bias-correct with the global step count instead of the per-cycle clock.
    pub global_bias_clock: bool,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
            eps_inside_sqrt: false,
            global_bias_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    First,
    Second,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdamStats {
    pub m_stalled: f64,
    pub v_stalled: f64,
    pub m_skipped: bool,
    pub v_skipped: bool,
    pub m_reset: bool,
    pub v_reset: bool,
    /// Cycle clocks used for this step's update, before any reset.
    pub m_k: u64,
    pub v_k: u64,
}

/// Adam with separately stored first and second moments, each with its own
/// reset strategy.
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    hyper: AdamHyper,
    m: EmaState,
    v: EmaState,
    m_reset: Box<dyn ResetStrategy>,
    v_reset: Box<dyn ResetStrategy>,
    skip: Option<(Moment, f64)>,
    t: u64,
    sq: Vec<f64>,
}

impl AdamOptimizer {
    pub fn new(
        len: usize,
        hyper: AdamHyper,
        m_storage: Storage,
        v_storage: Storage,
        rounding: RoundingMode,
    ) -> Result<Self> {
        if !(hyper.lr.is_finite() && hyper.eps >= 0.0 && hyper.weight_decay >= 0.0) {
            return Err(Error::usage(
                "lr must be finite, eps and weight_decay non-negative",
            ));
        }
        let m = EmaState::zeros(len, EmaConfig::new(hyper.beta1, m_storage, rounding))?;
        let v = EmaState::zeros(len, EmaConfig::new(hyper.beta2, v_storage, rounding))?;
        Ok(AdamOptimizer {
            hyper,
            m,
            v,
            m_reset: Box::new(NoReset),
            v_reset: Box::new(NoReset),
            skip: None,
            t: 0,
            sq: vec![0.0; len],
        })
    }

    /// Full-precision Adam.
    pub fn full(len: usize, hyper: AdamHyper) -> Result<Self> {
        AdamOptimizer::new(
            len,
            hyper,
            Storage::Full,
            Storage::Full,
            RoundingMode::Nearest,
        )
    }

    pub fn with_resets(mut self, m: Box<dyn ResetStrategy>, v: Box<dyn ResetStrategy>) -> Self {
        self.m_reset = m;
        self.v_reset = v;
        self
    }

    /// Skip updates of `moment` with probability `p` from now on; `None` disables.
    pub fn set_skip(&mut self, skip: Option<(Moment, f64)>) -> Result<()> {
        if let Some((_, p)) = skip {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::usage(format!(
                    "skip probability must lie in [0, 1], got {p}"
                )));
            }
        }
        self.skip = skip;
        Ok(())
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    pub fn m(&self) -> &EmaState {
        &self.m
    }

    pub fn v(&self) -> &EmaState {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One optimizer step with learning rate `lr * lr_scale`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr_scale: f64,
        rng: &mut R,
    ) -> Result<AdamStats> {
        let n = self.m.len();
        if params.len() != n || grad.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: if params.len() != n {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        self.t += 1;
        let mut stats = AdamStats::default();
        for (s, g) in self.sq.iter_mut().zip(grad) {
            *s = g * g;
        }

        let p_m = match self.skip {
            Some((Moment::First, p)) => p,
            _ => 0.0,
        };
        let p_v = match self.skip {
            Some((Moment::Second, p)) => p,
            _ => 0.0,
        };
        let om = self.m.skip_step(grad, p_m, rng)?;
        let ov = self.v.skip_step(&self.sq, p_v, rng)?;
        stats.m_stalled = om.stalled_fraction;
        stats.v_stalled = ov.stalled_fraction;
        stats.m_skipped = om.skipped;
        stats.v_skipped = ov.skipped;

        let h = &self.hyper;
        let (km, kv) = if h.global_bias_clock {
            (self.t, self.t)
        } else {
            (self.m.cycle_step(), self.v.cycle_step())
        };
        stats.m_k = km;
        stats.v_k = kv;
        let bc1 = 1.0 - h.beta1.powf(km as f64);
        let bc2 = 1.0 - h.beta2.powf(kv as f64);
        let lr = h.lr * lr_scale;
        let decay = 1.0 - lr * h.weight_decay;
        for ((p, &mp), &vp) in params
            .iter_mut()
            .zip(self.m.proposal())
            .zip(self.v.proposal())
        {
            let mh = mp / bc1;
            let vh = vp / bc2;
            let denom = if h.eps_inside_sqrt {
                (vh + h.eps).sqrt()
            } else {
                vh.sqrt() + h.eps
            };
            *p = *p * decay - lr * mh / denom;
        }

        stats.m_reset = self
            .m
            .apply_reset_policy(self.m_reset.as_mut(), stats.m_stalled)?;
        stats.v_reset = self
            .v
            .apply_reset_policy(self.v_reset.as_mut(), stats.v_stalled)?;
        Ok(stats)
    }
}
