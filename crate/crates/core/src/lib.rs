//! Quantized exponential-moving-average optimizer states.
//!
//! Minifloat emulation, tensor quantization with per-tensor or block-wise
//! scales, closed-form stall predictors, a quantized EMA/Adam engine with
//! reset policies, and seeded simulation drivers.

pub mod ema;
pub mod error;
pub mod minifloat;
pub mod quantizer;
pub mod simlab;
pub mod theory;

pub use error::{Error, Result};
pub use minifloat::{FpFormat, GridValue, RoundingMode};
pub use quantizer::{QuantizedBlock, ScalingScheme, StallCriterion};
