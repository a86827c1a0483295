//! Software emulation of parametric minifloat formats.
//!
//! A format is described by its sign, exponent and mantissa widths plus an
//! exponent bias. Codes are laid out as `[sign][exponent][mantissa]`, the
//! usual IEEE arrangement, but every code is finite: there are no NaN or
//! infinity encodings. Values are decoded into `f64`, which holds every grid
//! point of every supported format exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported total bit width.
pub const MAX_BITS: u32 = 16;

/// Exact `2^k` for the exponent range used by the supported formats.
#[inline]
pub(crate) fn pow2(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        2f64.powi(k)
    }
}

/// Unbiased binary exponent of a positive finite `f64`, i.e. `floor(log2(x))`.
/// Subnormal inputs report -1023, below every supported format.
#[inline]
fn exponent_of(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Parametric minifloat description.
/// Serializes as its [`FpFormat::name`], which [`FpFormat::from_name`] parses back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FpFormat {
    pub sign_bits: u8,
    pub exp_bits: u8,
    pub mant_bits: u8,
    pub bias: i32,
    pub has_subnormals: bool,
    pub saturate_on_overflow: bool,
    /// The grid omits the zero code; sub-threshold magnitudes map to `s_min`.
    pub exclude_zero: bool,
}

impl FpFormat {
    /// bfloat16 layout (1/8/7, bias 127).
    pub const BF16: FpFormat = FpFormat::preset(1, 8, 7, 127);
    /// FP8 E4M3 as a pure minifloat (no NaN codes, max 480).
    pub const FP8_E4M3: FpFormat = FpFormat::preset(1, 4, 3, 7);
    /// FP4 E2M1 (values 0, 0.5, 1, 1.5, 2, 3, 4, 6).
    pub const FP4_E2M1: FpFormat = FpFormat::preset(1, 2, 1, 1);
    /// Unsigned FP4 E2M2 (values 0, 0.25 .. 7).
    pub const FP4_E2M2U: FpFormat = FpFormat::preset(0, 2, 2, 1);

    const fn preset(sign_bits: u8, exp_bits: u8, mant_bits: u8, bias: i32) -> Self {
        FpFormat {
            sign_bits,
            exp_bits,
            mant_bits,
            bias,
            has_subnormals: true,
            saturate_on_overflow: true,
            exclude_zero: false,
        }
    }

    /// Builds and validates a custom format.
    pub fn new(sign_bits: u8, exp_bits: u8, mant_bits: u8, bias: i32) -> Result<Self> {
        FpFormat::preset(sign_bits, exp_bits, mant_bits, bias).validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.sign_bits > 1 {
            return Err(Error::usage("sign_bits must be 0 or 1"));
        }
        if self.exp_bits < 1 {
            return Err(Error::usage("exp_bits must be at least 1"));
        }
        if self.bit_width() > MAX_BITS {
            return Err(Error::usage(format!(
                "total bit width {} exceeds {MAX_BITS}",
                self.bit_width()
            )));
        }
        if self.max_exponent() > 1023 || self.min_exponent() - (self.mant_bits as i32) < -1022 {
            return Err(Error::usage("exponent range does not fit in f64"));
        }
        Ok(self)
    }

    pub fn with_subnormals(mut self, on: bool) -> Self {
        self.has_subnormals = on;
        self
    }

    pub fn with_saturation(mut self, on: bool) -> Self {
        self.saturate_on_overflow = on;
        self
    }

    pub fn with_exclude_zero(mut self, on: bool) -> Self {
        self.exclude_zero = on;
        self
    }

    /// Canonical preset names accepted by [`FpFormat::from_name`].
    pub const PRESET_NAMES: [&'static str; 4] = ["bf16", "fp8_e4m3", "fp4_e2m1", "fp4_e2m2u"];

    /// Parses a preset name or an `s1e4m3b7` layout tag, optionally followed
    /// by `+nosub`, `+nosat` and `+nozero` flags.
    pub fn from_name(name: &str) -> Result<Self> {
        let unknown = || Error::Unknown {
            kind: "format",
            name: name.to_string(),
        };
        let mut parts = name.split('+');
        let base = parts.next().unwrap_or_default();
        let mut f = match base {
            "bf16" => FpFormat::BF16,
            "fp8_e4m3" | "fp8" => FpFormat::FP8_E4M3,
            "fp4_e2m1" => FpFormat::FP4_E2M1,
            "fp4_e2m2u" | "fp4" => FpFormat::FP4_E2M2U,
            other => parse_layout(other).ok_or_else(unknown)??,
        };
        for flag in parts {
            match flag {
                "nosub" => f.has_subnormals = false,
                "nosat" => f.saturate_on_overflow = false,
                "nozero" => f.exclude_zero = true,
                _ => return Err(unknown()),
            }
        }
        Ok(f)
    }

    /// Preset name when the layout matches a preset, otherwise a descriptive
    /// `s1e4m3b7` style tag. Flags are appended when they differ from the
    /// preset defaults.
    pub fn name(&self) -> String {
        let base = FpFormat::preset(self.sign_bits, self.exp_bits, self.mant_bits, self.bias);
        let mut name = FpFormat::PRESET_NAMES
            .iter()
            .find(|n| FpFormat::from_name(n).is_ok_and(|f| f == base))
            .map(|n| n.to_string())
            .unwrap_or_else(|| {
                format!(
                    "s{}e{}m{}b{}",
                    self.sign_bits, self.exp_bits, self.mant_bits, self.bias
                )
            });
        if !self.has_subnormals {
            name.push_str("+nosub");
        }
        if !self.saturate_on_overflow {
            name.push_str("+nosat");
        }
        if self.exclude_zero {
            name.push_str("+nozero");
        }
        name
    }

    pub fn bit_width(&self) -> u32 {
        self.sign_bits as u32 + self.exp_bits as u32 + self.mant_bits as u32
    }

    pub fn is_signed(&self) -> bool {
        self.sign_bits == 1
    }

    fn mag_bits(&self) -> u32 {
        self.exp_bits as u32 + self.mant_bits as u32
    }

    fn sign_mask(&self) -> u16 {
        if self.is_signed() {
            1 << self.mag_bits()
        } else {
            0
        }
    }

    /// Largest magnitude code (all exponent and mantissa bits set).
    fn max_mag_code(&self) -> u16 {
        ((1u32 << self.mag_bits()) - 1) as u16
    }

    /// Number of distinct bit patterns.
    pub fn code_count(&self) -> u32 {
        1 << self.bit_width()
    }

    /// Relative grid spacing parameter `2^-mant_bits`.
    pub fn epsilon(&self) -> f64 {
        pow2(-(self.mant_bits as i32))
    }

    /// Exponent of the smallest normal binade.
    pub fn min_exponent(&self) -> i32 {
        1 - self.bias
    }

    /// Exponent of the largest binade.
    pub fn max_exponent(&self) -> i32 {
        ((1i32 << self.exp_bits) - 1) - self.bias
    }

    pub fn x_max(&self) -> f64 {
        (2.0 - pow2(-(self.mant_bits as i32))) * pow2(self.max_exponent())
    }

    pub fn min_normal(&self) -> f64 {
        pow2(self.min_exponent())
    }

    /// Smallest positive representable value.
    pub fn s_min(&self) -> f64 {
        if self.has_subnormals {
            pow2(self.min_exponent() - self.mant_bits as i32)
        } else {
            self.min_normal()
        }
    }

    /// Iterates over every valid code in ascending code order.
    pub fn codes(&self) -> impl Iterator<Item = u16> + '_ {
        (0..self.code_count())
            .map(|c| c as u16)
            .filter(|&c| self.is_valid_code(c))
    }

    pub fn is_valid_code(&self, code: u16) -> bool {
        if (code as u32) >= self.code_count() {
            return false;
        }
        let mag = code & self.max_mag_code();
        let e_field = mag >> self.mant_bits;
        let mant = mag & ((1 << self.mant_bits) - 1);
        if e_field == 0 {
            if mant == 0 {
                return !self.exclude_zero;
            }
            return self.has_subnormals;
        }
        true
    }

    fn check_code(&self, code: u16) -> Result<()> {
        if (code as u32) >= self.code_count() {
            return Err(Error::usage(format!(
                "code {code:#x} does not fit in {} bits",
                self.bit_width()
            )));
        }
        if !self.is_valid_code(code) {
            let mag = code & self.max_mag_code();
            if mag == 0 {
                return Err(Error::domain(format!(
                    "zero code {code:#x} is excluded from {}",
                    self.name()
                )));
            }
            return Err(Error::usage(format!(
                "code {code:#x} is a subnormal pattern but {} has no subnormals",
                self.name()
            )));
        }
        Ok(())
    }

    /// Exact value of a grid point.
    pub fn decode(&self, code: u16) -> Result<f64> {
        self.check_code(code)?;
        let mag = self.decode_magnitude(code & self.max_mag_code());
        Ok(if code & self.sign_mask() != 0 {
            -mag
        } else {
            mag
        })
    }

    #[inline]
    fn decode_magnitude(&self, mag: u16) -> f64 {
        let m = self.mant_bits as i32;
        let e_field = (mag >> m) as i32;
        let mant = (mag & ((1 << m) - 1)) as f64;
        if e_field == 0 {
            mant * pow2(self.min_exponent() - m)
        } else {
            (pow2(m) + mant) * pow2(e_field - self.bias - m)
        }
    }

    /// Magnitude code of an exactly representable non-negative value.
    #[inline]
    fn magnitude_code(&self, v: f64) -> u16 {
        if v == 0.0 {
            return 0;
        }
        let m = self.mant_bits as i32;
        let emin = self.min_exponent();
        if v < self.min_normal() {
            return (v / pow2(emin - m)) as u16;
        }
        let e = exponent_of(v);
        let e_field = (e + self.bias) as u16;
        let mant = (v / pow2(e - m)) as u16 - (1u16 << m);
        (e_field << m) | mant
    }

    /// Distance from `code` to the next grid point of larger magnitude.
    ///
    /// The largest finite code has no larger neighbour; for it the spacing of
    /// its own binade (distance to the next smaller point) is returned.
    pub fn ulp_at(&self, code: u16) -> Result<f64> {
        self.check_code(code)?;
        let m = self.mant_bits as i32;
        let e_field = ((code & self.max_mag_code()) >> m) as i32;
        if e_field == 0 {
            if self.has_subnormals {
                Ok(pow2(self.min_exponent() - m))
            } else {
                Ok(self.min_normal())
            }
        } else {
            Ok(pow2(e_field - self.bias - m))
        }
    }

    /// Neighbouring grid magnitudes `lo <= a < hi` (or `lo == hi == a` when
    /// `a` is zero) and whether `lo` has an even significand.
    #[inline]
    fn bracket(&self, a: f64) -> (f64, f64, bool) {
        if a == 0.0 {
            return (0.0, 0.0, true);
        }
        let m = self.mant_bits as i32;
        let emin = self.min_exponent();
        if !self.has_subnormals && a < self.min_normal() {
            return (0.0, self.min_normal(), true);
        }
        let e = exponent_of(a).max(emin);
        let q = pow2(e - m);
        let n = (a / q).floor();
        let lo = n * q;
        if lo == a {
            return (a, a, n % 2.0 == 0.0);
        }
        (lo, lo + q, n % 2.0 == 0.0)
    }

    /// Validates `x` and returns `(negative, magnitude)` with saturation applied.
    fn prepare(&self, x: f64) -> Result<(bool, f64)> {
        if !x.is_finite() {
            return Err(Error::domain(format!("cannot round non-finite value {x}")));
        }
        if !self.is_signed() && x < 0.0 {
            return Err(Error::domain(format!(
                "negative value {x} in unsigned format {}",
                self.name()
            )));
        }
        let neg = self.is_signed() && x.is_sign_negative();
        let mut a = x.abs();
        let max = self.x_max();
        if a > max {
            if !self.saturate_on_overflow {
                return Err(Error::Overflow {
                    value: x,
                    max,
                    format: self.name(),
                });
            }
            a = max;
        }
        Ok((neg, a))
    }

    #[inline]
    fn finish(&self, neg: bool, mut mag: f64) -> GridValue {
        if mag == 0.0 && self.exclude_zero {
            mag = self.s_min();
        }
        // zero has a single canonical code so that a sign flip at zero is not a state change
        let neg = neg && mag != 0.0;
        let mut code = self.magnitude_code(mag);
        if neg {
            code |= self.sign_mask();
        }
        GridValue {
            code,
            value: if neg { -mag } else { mag },
        }
    }

    /// Round to the nearest grid point, ties to even significand.
    pub fn round_nearest(&self, x: f64) -> Result<GridValue> {
        let (neg, a) = self.prepare(x)?;
        let (lo, hi, lo_even) = self.bracket(a);
        let below = a - lo;
        let above = hi - a;
        let mag = if below < above || (below == above && lo_even) {
            lo
        } else {
            hi
        };
        Ok(self.finish(neg, mag))
    }

    /// Round to one of the two bracketing grid points with probability
    /// proportional to proximity. Grid points return themselves. Consumes
    /// exactly one uniform draw.
    pub fn round_stochastic<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<GridValue> {
        let (neg, a) = self.prepare(x)?;
        let (lo, hi, _) = self.bracket(a);
        // one draw per call, on or off the grid, keeps streams aligned
        let u = rng.random::<f64>();
        let mag = if lo == hi || u >= (a - lo) / (hi - lo) {
            lo
        } else {
            hi
        };
        Ok(self.finish(neg, mag))
    }

    /// Rounds with the given mode. `rng` is required for stochastic rounding.
    pub fn round<R: Rng + ?Sized>(
        &self,
        x: f64,
        mode: RoundingMode,
        rng: Option<&mut R>,
    ) -> Result<GridValue> {
        match (mode, rng) {
            (RoundingMode::Nearest, _) => self.round_nearest(x),
            (RoundingMode::Stochastic, Some(rng)) => self.round_stochastic(x, rng),
            (RoundingMode::Stochastic, None) => {
                Err(Error::usage("stochastic rounding requires a random stream"))
            }
        }
    }
}

/// Parses `s<sign>e<exp>m<mant>b<bias>`.
fn parse_layout(tag: &str) -> Option<Result<FpFormat>> {
    let rest = tag.strip_prefix('s')?;
    let (sign, rest) = rest.split_once('e')?;
    let (exp, rest) = rest.split_once('m')?;
    let (mant, bias) = rest.split_once('b')?;
    Some(FpFormat::new(
        sign.parse().ok()?,
        exp.parse().ok()?,
        mant.parse().ok()?,
        bias.parse().ok()?,
    ))
}

impl Serialize for FpFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for FpFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        FpFormat::from_name(&name).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for FpFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FpFormat::from_name(s)
    }
}

/// A grid point: bit pattern and its exact value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridValue {
    pub code: u16,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundingMode {
    #[serde(rename = "nr")]
    Nearest,
    #[serde(rename = "sr")]
    Stochastic,
}

impl RoundingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoundingMode::Nearest => "nr",
            RoundingMode::Stochastic => "sr",
        }
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nr" | "nearest" => Ok(RoundingMode::Nearest),
            "sr" | "stochastic" => Ok(RoundingMode::Stochastic),
            other => Err(Error::Unknown {
                kind: "rounding mode",
                name: other.to_string(),
            }),
        }
    }
}
