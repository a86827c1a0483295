//! The quantized EMA recursion `x_t = beta x_{t-1} + (1 - beta) s_t`.
//!
//! Each step reads the stored state, forms the update in `f64`, and writes
//! it back through the configured storage. The `f64` proposal stays
//! available for the caller until the next step.

mod adam;
mod reset;
mod trace;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minifloat::{FpFormat, RoundingMode};
use crate::quantizer::{quantize, QuantizedBlock, ScalingScheme, StallCriterion};

pub use adam::{AdamHyper, AdamOptimizer, AdamStats, Moment};
pub use reset::{
    Adaptive, MomentTarget, NoReset, Periodic, ResetFactory, ResetPolicy, ResetRegistry,
    ResetStrategy,
};
pub use trace::{write_traces_csv, StallTrace};

/// Where the state lives between steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Storage {
    /// Exact `f64` storage; nothing is rounded.
    Full,
    Quantized {
        format: FpFormat,
        #[serde(default)]
        scheme: ScalingScheme,
    },
}

impl Storage {
    pub fn quantized(format: FpFormat, scheme: ScalingScheme) -> Self {
        Storage::Quantized { format, scheme }
    }

    pub fn label(&self) -> String {
        match self {
            Storage::Full => "full".into(),
            Storage::Quantized { format, scheme } => format!("{}/{}", format, scheme.label()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub beta: f64,
    pub storage: Storage,
    pub rounding: RoundingMode,
    #[serde(default)]
    pub stall_criterion: StallCriterion,
}

impl EmaConfig {
    pub fn new(beta: f64, storage: Storage, rounding: RoundingMode) -> Self {
        EmaConfig {
            beta,
            storage,
            rounding,
            stall_criterion: StallCriterion::Code,
        }
    }

    pub fn full(beta: f64) -> Self {
        EmaConfig::new(beta, Storage::Full, RoundingMode::Nearest)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::usage(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if let Storage::Quantized { format, scheme } = self.storage {
            format.validated()?;
            scheme.validated()?;
        }
        Ok(())
    }

    pub fn needs_rng(&self) -> bool {
        matches!(self.storage, Storage::Quantized { .. })
            && self.rounding == RoundingMode::Stochastic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    Full(Vec<f64>),
    Quantized(QuantizedBlock),
}

/// Result of a step that may have been skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipOutcome {
    pub skipped: bool,
    pub stalled_fraction: f64,
}

/// A stored EMA tensor with its cycle clock.
#[derive(Debug, Clone)]
pub struct EmaState {
    config: EmaConfig,
    stored: Stored,
    values: Vec<f64>,
    proposal: Vec<f64>,
    k: u64,
}

impl EmaState {
    /// A zero-initialized state of `len` elements.
    pub fn zeros(len: usize, config: EmaConfig) -> Result<Self> {
        EmaState::from_values(&vec![0.0; len], config, None::<&mut ChaCha8Rng>)
    }

    /// A state holding the storage image of `values`.
    pub fn from_values<R: Rng + ?Sized>(
        values: &[f64],
        config: EmaConfig,
        rng: Option<&mut R>,
    ) -> Result<Self> {
        config.validate()?;
        let stored = store(&config, values, rng)?;
        let decoded = decode(&stored);
        Ok(EmaState {
            config,
            stored,
            proposal: decoded.clone(),
            values: decoded,
            k: 0,
        })
    }

    pub fn config(&self) -> &EmaConfig {
        &self.config
    }

    pub fn stored(&self) -> &Stored {
        &self.stored
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Steps since the last reset.
    pub fn cycle_step(&self) -> u64 {
        self.k
    }

    /// Current stored values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `f64` result of the most recent update, before storage rounding.
    pub fn proposal(&self) -> &[f64] {
        &self.proposal
    }

    /// One EMA update. Returns the fraction of elements whose stored state
    /// did not change.
    pub fn step<R: Rng + ?Sized>(&mut self, signal: &[f64], rng: Option<&mut R>) -> Result<f64> {
        if signal.len() != self.values.len() {
            return Err(Error::Shape {
                expected: self.values.len(),
                got: signal.len(),
            });
        }
        if let Some(i) = signal.iter().position(|s| !s.is_finite()) {
            return Err(Error::domain(format!("non-finite signal at index {i}")));
        }
        if self.config.needs_rng() && rng.is_none() {
            return Err(Error::usage("stochastic rounding requires a random stream"));
        }
        let b = self.config.beta;
        for ((p, &x), &s) in self.proposal.iter_mut().zip(&self.values).zip(signal) {
            *p = b * x + (1.0 - b) * s;
        }
        let next = store(&self.config, &self.proposal, rng)?;
        let stalled = stalled_fraction(&self.stored, &next, self.config.stall_criterion)?;
        self.values = decode(&next);
        self.stored = next;
        self.k += 1;
        Ok(stalled)
    }

    /// With probability `p_skip` leaves the stored state untouched (the
    /// proposal becomes the current state); otherwise performs [`EmaState::step`].
    /// The cycle clock advances either way.
    pub fn skip_step<R: Rng + ?Sized>(
        &mut self,
        signal: &[f64],
        p_skip: f64,
        rng: &mut R,
    ) -> Result<SkipOutcome> {
        if !(0.0..=1.0).contains(&p_skip) {
            return Err(Error::usage(format!(
                "p_skip must lie in [0, 1], got {p_skip}"
            )));
        }
        if p_skip > 0.0 && rng.random::<f64>() < p_skip {
            if signal.len() != self.values.len() {
                return Err(Error::Shape {
                    expected: self.values.len(),
                    got: signal.len(),
                });
            }
            self.proposal.copy_from_slice(&self.values);
            self.k += 1;
            return Ok(SkipOutcome {
                skipped: true,
                stalled_fraction: 1.0,
            });
        }
        let stalled_fraction = self.step(signal, Some(rng))?;
        Ok(SkipOutcome {
            skipped: false,
            stalled_fraction,
        })
    }

    /// Writes the storage image of zero and restarts the cycle clock.
    pub fn reset(&mut self) -> Result<()> {
        let zeros = vec![0.0; self.values.len()];
        self.stored = store(&self.config, &zeros, None::<&mut ChaCha8Rng>)?;
        self.values = decode(&self.stored);
        self.proposal.copy_from_slice(&self.values);
        self.k = 0;
        Ok(())
    }

    /// Feeds the step's stalled fraction to `strategy` and resets when it fires.
    pub fn apply_reset_policy(
        &mut self,
        strategy: &mut dyn ResetStrategy,
        last_fraction: f64,
    ) -> Result<bool> {
        if strategy.should_reset(self.k, last_fraction) {
            self.reset()?;
            strategy.on_reset();
            return Ok(true);
        }
        Ok(false)
    }
}

fn store<R: Rng + ?Sized>(
    config: &EmaConfig,
    values: &[f64],
    rng: Option<&mut R>,
) -> Result<Stored> {
    match config.storage {
        Storage::Full => {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::domain(format!("non-finite value at index {i}")));
            }
            Ok(Stored::Full(values.to_vec()))
        }
        Storage::Quantized { format, scheme } => {
            // writes without a stream (initialization, resets) round to nearest
            let mode = if rng.is_some() {
                config.rounding
            } else {
                RoundingMode::Nearest
            };
            Ok(Stored::Quantized(quantize(
                values, &format, &scheme, mode, rng,
            )?))
        }
    }
}

fn decode(stored: &Stored) -> Vec<f64> {
    match stored {
        Stored::Full(v) => v.clone(),
        Stored::Quantized(q) => q.dequantize(),
    }
}

fn stalled_fraction(prev: &Stored, next: &Stored, criterion: StallCriterion) -> Result<f64> {
    match (prev, next) {
        (Stored::Full(a), Stored::Full(b)) => {
            if a.is_empty() {
                return Ok(1.0);
            }
            let same = a
                .iter()
                .zip(b)
                .filter(|(x, y)| x.to_bits() == y.to_bits())
                .count();
            Ok(same as f64 / a.len() as f64)
        }
        (Stored::Quantized(a), Stored::Quantized(b)) => a.stalled_fraction(b, criterion),
        _ => Err(Error::usage("cannot compare full and quantized storage")),
    }
}

#[cfg(test)]
mod tests;
