//! Closed-form stall predictors.
//!
//! Second-moment updates are modelled with `g^2 / sigma^2 ~ chi-square(1)` and
//! a log-uniform mantissa, which collapses the grid geometry into a single
//! effective precision ratio `rhohat = eps / (2 (1 - beta2) mbar)`.

mod special;
mod table;

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minifloat::FpFormat;

pub use special::{chi2_1_cdf, chi2_1_inv, erf, erfc, norm_cdf, norm_pdf};
pub use table::{predictor_table, write_predictor_csv, PredictorRow, TableCell};

use special::{chi2_1_cdf_unchecked as cdf, integrate};

/// Mean of the log-uniform mantissa on `[1, 2)`.
pub const MBAR: f64 = 1.0 / LN_2;

/// `E|z - 1|` for `z ~ chi-square(1)`, equal to `4 phi(1)`.
pub fn mu1() -> f64 {
    4.0 * norm_pdf(1.0)
}

/// Inputs shared by the predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub beta2: f64,
    pub format: FpFormat,
    /// Stalled fraction already present right after initialization or reset.
    pub p_init: f64,
    /// Tolerance below which transient staleness is not counted.
    pub s0: f64,
    /// Fraction of exactly-zero second-moment proposals.
    pub p_zero: f64,
    /// Scaling group size.
    pub block_size: usize,
}

impl TheoryInputs {
    pub fn new(beta2: f64, format: FpFormat) -> Self {
        TheoryInputs {
            beta2,
            format,
            p_init: 0.0,
            s0: 0.6,
            p_zero: 0.0,
            block_size: 128,
        }
    }

    pub fn with_p_init(mut self, p_init: f64) -> Self {
        self.p_init = p_init;
        self
    }

    pub fn with_s0(mut self, s0: f64) -> Self {
        self.s0 = s0;
        self
    }

    pub fn with_p_zero(mut self, p_zero: f64) -> Self {
        self.p_zero = p_zero;
        self
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta2)?;
        if !(0.0..1.0).contains(&self.p_init) {
            return Err(Error::usage(format!(
                "p_init must be in [0, 1), got {}",
                self.p_init
            )));
        }
        if !(0.0..1.0).contains(&self.s0) {
            return Err(Error::usage(format!(
                "s0 must be in [0, 1), got {}",
                self.s0
            )));
        }
        if !(0.0..=1.0).contains(&self.p_zero) {
            return Err(Error::usage(format!(
                "p_zero must be in [0, 1], got {}",
                self.p_zero
            )));
        }
        if self.block_size < 1 {
            return Err(Error::usage("block_size must be at least 1"));
        }
        Ok(())
    }

    pub fn rhohat(&self) -> f64 {
        self.format.epsilon() / (2.0 * (1.0 - self.beta2) * MBAR)
    }

    /// Ratio `s_min / (2 x_max)`: scaled proposals below this fraction of the
    /// group maximum round to the smallest code.
    pub fn tau_crush(&self) -> f64 {
        self.format.s_min() / (2.0 * self.format.x_max())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::domain(format!(
            "decay must lie in (0, 1), got {beta}"
        )));
    }
    Ok(())
}

/// A predictor value with intermediate quantities kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorOutput {
    pub value: f64,
    pub meta: BTreeMap<String, f64>,
}

/// Effective precision ratio for relative spacing `eps` and decay `beta2`.
pub fn rhohat(eps: f64, beta2: f64) -> Result<f64> {
    check_beta(beta2)?;
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    Ok(eps / (2.0 * (1.0 - beta2) * MBAR))
}

/// Steady-state stall probability under nearest rounding.
/// Non-positive `rhohat` is treated as the limit `0`.
pub fn p_stall_nr_ss(rhohat: f64) -> f64 {
    if !(rhohat > 0.0) {
        return 0.0;
    }
    cdf(1.0 + rhohat) - cdf((1.0 - rhohat).max(0.0))
}

/// Expectation of `g(z)` over `z ~ chi-square(1)` restricted to `[z_lo, z_hi]`,
/// integrated in `u = sqrt(z)` where the density is smooth. `kinks` are extra
/// split points in `z`.
fn chi2_expectation<G: Fn(f64) -> f64>(g: G, z_lo: f64, z_hi: f64, kinks: &[f64], tol: f64) -> f64 {
    let mut cuts = vec![z_lo.max(0.0).sqrt()];
    for &k in kinks {
        if k > z_lo && k < z_hi {
            cuts.push(k.sqrt());
        }
    }
    cuts.push(z_hi.sqrt());
    let f = |u: f64| 2.0 * norm_pdf(u) * g(u * u);
    cuts.windows(2)
        .map(|w| integrate(&f, w[0], w[1], tol))
        .sum()
}

/// Steady-state stall probability under stochastic rounding.
pub fn p_stall_sr_ss(rhohat: f64) -> f64 {
    if !(rhohat > 0.0) {
        return 0.0;
    }
    let w = 2.0 * rhohat;
    let gate = |z: f64| (1.0 - (z - 1.0).abs() / w).max(0.0);
    chi2_expectation(gate, (1.0 - w).max(0.0), 1.0 + w, &[1.0], 1e-12)
}

/// Large-`rhohat` expansion `1 - mu1 / (2 rhohat)` of [`p_stall_sr_ss`].
pub fn p_stall_sr_asymptotic(rhohat: f64) -> f64 {
    1.0 - mu1() / (2.0 * rhohat)
}

/// Transient stall probability `j` steps after a zero reset, nearest rounding.
pub fn p_stall_nr_transient(j: u64, beta2: f64, rhohat: f64) -> f64 {
    let phi = -(j as f64 * beta2.ln()).exp_m1();
    if phi <= 0.0 {
        return 0.0;
    }
    cdf(phi * (1.0 + rhohat)) - cdf((phi * (1.0 - rhohat)).max(0.0))
}

/// Decay and time constant after accounting for a stalled fraction of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDecay {
    pub beta_eff: f64,
    /// `f64::INFINITY` when every step stalls.
    pub tau_eff: f64,
}

pub fn effective_decay(beta2: f64, p_stall: f64) -> Result<EffectiveDecay> {
    check_beta(beta2)?;
    if !(0.0..=1.0).contains(&p_stall) {
        return Err(Error::domain(format!(
            "p_stall must lie in [0, 1], got {p_stall}"
        )));
    }
    let keep = 1.0 - p_stall;
    Ok(EffectiveDecay {
        beta_eff: 1.0 - (1.0 - beta2) * keep,
        tau_eff: if keep == 0.0 {
            f64::INFINITY
        } else {
            1.0 / ((1.0 - beta2) * keep)
        },
    })
}

fn typical_group_max(block_size: usize) -> Result<f64> {
    if block_size < 2 {
        return Err(Error::usage(
            "initial-floor model needs a group of at least 2",
        ));
    }
    chi2_1_inv(1.0 - 1.0 / block_size as f64)
}

/// Modelled initial stalled fraction under nearest rounding: exact zeros plus
/// proposals crushed to the bottom code by the group scale.
pub fn p_init_model(inputs: &TheoryInputs) -> Result<f64> {
    inputs.validate()?;
    let m_b = typical_group_max(inputs.block_size)?;
    let f_crush = cdf(inputs.tau_crush() * m_b);
    Ok(inputs.p_zero + (1.0 - inputs.p_zero) * f_crush)
}

/// Stochastic-rounding counterpart of [`p_init_model`]: a crushed proposal
/// stays at the bottom code with probability `1 - z / (2 tau M_B)`.
pub fn p_init_model_sr(inputs: &TheoryInputs) -> Result<f64> {
    inputs.validate()?;
    let m_b = typical_group_max(inputs.block_size)?;
    let c = 2.0 * inputs.tau_crush() * m_b;
    let gate = |z: f64| (1.0 - z / c).max(0.0);
    let f_crush = chi2_expectation(gate, 0.0, c, &[], 1e-13);
    Ok(inputs.p_zero + (1.0 - inputs.p_zero) * f_crush)
}

/// Startup window with its intermediate quantities.
pub fn startup_window_detail(p0: f64, inputs: &TheoryInputs) -> Result<PredictorOutput> {
    inputs.validate()?;
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::domain(format!("P0 must lie in (0, 1), got {p0}")));
    }
    let mut meta = BTreeMap::new();
    meta.insert("p_init".to_string(), inputs.p_init);
    if p0 <= inputs.p_init {
        return Ok(PredictorOutput { value: 0.0, meta });
    }
    let p0_eff = (p0 - inputs.p_init) / (1.0 - inputs.p_init);
    let quantile = chi2_1_inv(p0_eff)?;
    let limit = 1.0 + inputs.rhohat();
    meta.insert("p0_eff".to_string(), p0_eff);
    meta.insert("quantile".to_string(), quantile);
    if quantile >= limit {
        return Err(Error::ThresholdUnreachable { quantile, limit });
    }
    let phi_star = quantile / limit;
    meta.insert("phi_star".to_string(), phi_star);
    let j = ((-phi_star).ln_1p() / inputs.beta2.ln()).ceil().max(0.0);
    Ok(PredictorOutput { value: j, meta })
}

/// Steps after a reset before the transient stall probability reaches `p0`,
/// counting the initial floor `p_init`.
pub fn startup_window(p0: f64, inputs: &TheoryInputs) -> Result<u64> {
    Ok(startup_window_detail(p0, inputs)?.value as u64)
}

/// Remaining relative statistical error of a bias-corrected EMA after `k` steps.
pub fn remaining_error_e(k: u64, beta2: f64) -> f64 {
    let bk = beta2.powf(k as f64);
    2.0 * bk / (1.0 + bk)
}

/// Effective sample size of a bias-corrected EMA after `k` steps.
pub fn n_stat(k: u64, beta2: f64) -> f64 {
    let bk = beta2.powf(k as f64);
    (1.0 + beta2) * (1.0 - bk) / ((1.0 - beta2) * (1.0 + bk))
}

/// Limit of [`n_stat`] as `k` grows.
pub fn n_stat_limit(beta2: f64) -> f64 {
    (1.0 + beta2) / (1.0 - beta2)
}

/// Normalized transient staleness `S(j)` in `[0, 1]`.
fn normalized_staleness(j: u64, beta2: f64, rhohat: f64, p_ss: f64) -> f64 {
    p_stall_nr_transient(j, beta2, rhohat) / p_ss
}

#[inline]
fn excess(s: f64, s0: f64) -> f64 {
    ((s - s0) / (1.0 - s0)).max(0.0)
}

/// Cycle-averaged excess staleness over a cycle of `k` steps.
pub fn avg_excess_staleness(k: u64, inputs: &TheoryInputs) -> Result<f64> {
    inputs.validate()?;
    if k == 0 {
        return Err(Error::usage("cycle length must be at least 1"));
    }
    let rho = inputs.rhohat();
    let p_ss = p_stall_nr_ss(rho);
    let sum: f64 = (1..=k)
        .map(|j| excess(normalized_staleness(j, inputs.beta2, rho, p_ss), inputs.s0))
        .sum();
    Ok(sum / k as f64)
}

/// Cycle-averaged excess staleness for every cycle length `1..=k_max`.
pub fn excess_staleness_profile(k_max: u64, inputs: &TheoryInputs) -> Result<Vec<f64>> {
    inputs.validate()?;
    let rho = inputs.rhohat();
    let p_ss = p_stall_nr_ss(rho);
    let mut acc = 0.0;
    Ok((1..=k_max)
        .map(|k| {
            acc += excess(normalized_staleness(k, inputs.beta2, rho, p_ss), inputs.s0);
            acc / k as f64
        })
        .collect())
}

/// Hard cap on the reset-period scan.
const KSTAR_SCAN_LIMIT: u64 = 100_000_000;

/// Smallest cycle length whose averaged excess staleness reaches the remaining
/// statistical error `E(K)`.
pub fn reset_period_kstar(inputs: &TheoryInputs) -> Result<u64> {
    inputs.validate()?;
    let rho = inputs.rhohat();
    let p_ss = p_stall_nr_ss(rho);
    if p_ss <= 0.0 {
        return Err(Error::domain("stall probability vanishes; no reset period"));
    }
    let mut acc = 0.0;
    for k in 1..=KSTAR_SCAN_LIMIT {
        acc += excess(normalized_staleness(k, inputs.beta2, rho, p_ss), inputs.s0);
        if acc / k as f64 >= remaining_error_e(k, inputs.beta2) {
            return Ok(k);
        }
    }
    Err(Error::domain("no crossing found within the scan limit"))
}

/// Measured initial floors for the standard storage recipes: BF16 unscaled,
/// FP8 per-tensor, FP4 block-wise with an excluded zero point. Other formats
/// default to zero.
pub fn default_p_init(format: &FpFormat) -> f64 {
    let base = FpFormat {
        exclude_zero: false,
        ..*format
    };
    if base == FpFormat::BF16 {
        0.17
    } else if base == FpFormat::FP8_E4M3 {
        0.53
    } else if base == FpFormat::FP4_E2M2U || base == FpFormat::FP4_E2M1 {
        0.97
    } else {
        0.0
    }
}
