//! Scaled tensor quantization over a minifloat grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minifloat::{FpFormat, RoundingMode};

/// How a tensor is split into scale groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScalingScheme {
    /// One scale for the whole tensor, set so the largest magnitude maps to `x_max`.
    PerTensor,
    /// One max-abs scale per run of `block_size` elements; the last block may be short.
    Blockwise { block_size: usize },
    /// A constant scale that is never recomputed.
    Fixed { scale: f64 },
}

impl Default for ScalingScheme {
    fn default() -> Self {
        ScalingScheme::Blockwise { block_size: 128 }
    }
}

impl ScalingScheme {
    /// Scale fixed at one: values are stored directly on the format grid.
    pub const UNSCALED: ScalingScheme = ScalingScheme::Fixed { scale: 1.0 };

    pub fn blockwise(block_size: usize) -> Result<Self> {
        ScalingScheme::Blockwise { block_size }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        match self {
            ScalingScheme::Blockwise { block_size: 0 } => {
                Err(Error::usage("block_size must be at least 1"))
            }
            ScalingScheme::Fixed { scale } if !(scale.is_finite() && scale > 0.0) => Err(
                Error::usage(format!("fixed scale must be positive, got {scale}")),
            ),
            s => Ok(s),
        }
    }

    /// Elements per block for a tensor of `len` elements.
    pub fn block_len(&self, len: usize) -> usize {
        match *self {
            ScalingScheme::Blockwise { block_size } => block_size,
            _ => len.max(1),
        }
    }

    pub fn n_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.block_len(len)).max(1)
    }

    pub fn label(&self) -> String {
        match *self {
            ScalingScheme::PerTensor => "per_tensor".into(),
            ScalingScheme::Blockwise { block_size } => format!("blockwise{block_size}"),
            ScalingScheme::Fixed { scale } if scale == 1.0 => "unscaled".into(),
            ScalingScheme::Fixed { scale } => format!("fixed{scale}"),
        }
    }
}

/// Which differences count as a state change when detecting stalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallCriterion {
    /// An element is stalled when its stored code is unchanged.
    #[default]
    Code,
    /// An element is stalled only when both its code and its block scale are unchanged.
    CodeAndScale,
}

/// Integer codes plus per-block scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    codes: Vec<u16>,
    scales: Vec<f64>,
    format: FpFormat,
    scheme: ScalingScheme,
}

/// Smallest scale `s` near `amax / x_max` with `fl(fl(x_max * s) / x_max) == s`,
/// so that requantizing a dequantized block reproduces the same scale.
fn snap_scale(amax: f64, x_max: f64) -> f64 {
    let mut s = amax / x_max;
    for _ in 0..8 {
        let next = (x_max * s) / x_max;
        if next == s {
            return s;
        }
        s = next;
    }
    for cand in [
        s.next_down(),
        s.next_up(),
        s.next_down().next_down(),
        s.next_up().next_up(),
    ] {
        if (x_max * cand) / x_max == cand {
            return cand;
        }
    }
    s
}

fn block_scale(values: &[f64], format: &FpFormat, scheme: &ScalingScheme) -> f64 {
    if let ScalingScheme::Fixed { scale } = *scheme {
        return scale;
    }
    let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        // An excluded zero code cannot represent an all-zero block; a zero
        // scale over s_min codes still dequantizes to exact zeros.
        return if format.exclude_zero { 0.0 } else { 1.0 };
    }
    snap_scale(amax, format.x_max())
}

fn quantize_block<R: Rng + ?Sized>(
    values: &[f64],
    format: &FpFormat,
    scheme: &ScalingScheme,
    mode: RoundingMode,
    mut rng: Option<&mut R>,
    codes: &mut Vec<u16>,
) -> Result<f64> {
    let scale = block_scale(values, format, scheme);
    let divisor = if scale == 0.0 { 1.0 } else { scale };
    let clamp = !matches!(scheme, ScalingScheme::Fixed { .. });
    let x_max = format.x_max();
    for &v in values {
        let mut y = v / divisor;
        if clamp {
            y = y.clamp(-x_max, x_max);
        }
        let g = match mode {
            RoundingMode::Nearest => format.round_nearest(y)?,
            RoundingMode::Stochastic => {
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::usage("stochastic rounding requires a random stream"))?;
                format.round_stochastic(y, r)?
            }
        };
        codes.push(g.code);
    }
    Ok(scale)
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::domain(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Quantizes `values` block by block. `rng` must be present for stochastic rounding.
pub fn quantize<R: Rng + ?Sized>(
    values: &[f64],
    format: &FpFormat,
    scheme: &ScalingScheme,
    mode: RoundingMode,
    mut rng: Option<&mut R>,
) -> Result<QuantizedBlock> {
    let scheme = scheme.validated()?;
    check_finite(values)?;
    let bl = scheme.block_len(values.len());
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(scheme.n_blocks(values.len()));
    if values.is_empty() {
        scales.push(block_scale(values, format, &scheme));
    }
    for chunk in values.chunks(bl) {
        scales.push(quantize_block(
            chunk,
            format,
            &scheme,
            mode,
            rng.as_deref_mut(),
            &mut codes,
        )?);
    }
    Ok(QuantizedBlock {
        codes,
        scales,
        format: *format,
        scheme,
    })
}

/// Quantizes with nearest rounding.
pub fn quantize_nearest(
    values: &[f64],
    format: &FpFormat,
    scheme: &ScalingScheme,
) -> Result<QuantizedBlock> {
    quantize::<ChaCha8Rng>(values, format, scheme, RoundingMode::Nearest, None)
}

/// Block-parallel quantization. Block `b` draws from ChaCha8 stream `b` of
/// `seed`, so the result is independent of thread count.
pub fn quantize_par(
    values: &[f64],
    format: &FpFormat,
    scheme: &ScalingScheme,
    mode: RoundingMode,
    seed: u64,
) -> Result<QuantizedBlock> {
    let scheme = scheme.validated()?;
    check_finite(values)?;
    let bl = scheme.block_len(values.len());
    let parts: Vec<Result<(Vec<u16>, f64)>> = values
        .par_chunks(bl)
        .enumerate()
        .map(|(b, chunk)| {
            let mut rng = block_stream(seed, b);
            let mut codes = Vec::with_capacity(chunk.len());
            let s = quantize_block(chunk, format, &scheme, mode, Some(&mut rng), &mut codes)?;
            Ok((codes, s))
        })
        .collect();
    let mut codes = Vec::with_capacity(values.len());
    let mut scales = Vec::new();
    for p in parts {
        let (c, s) = p?;
        codes.extend(c);
        scales.push(s);
    }
    if values.is_empty() {
        scales.push(block_scale(values, format, &scheme));
    }
    Ok(QuantizedBlock {
        codes,
        scales,
        format: *format,
        scheme,
    })
}

/// The random stream used for block `b` by [`quantize_par`].
pub fn block_stream(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

impl QuantizedBlock {
    /// Quantization of an all-zero tensor: the reset value.
    pub fn zeros(len: usize, format: &FpFormat, scheme: &ScalingScheme) -> Result<Self> {
        quantize_nearest(&vec![0.0; len], format, scheme)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn format(&self) -> &FpFormat {
        &self.format
    }

    pub fn scheme(&self) -> &ScalingScheme {
        &self.scheme
    }

    fn block_len(&self) -> usize {
        self.scheme.block_len(self.codes.len())
    }

    /// Scale of the block containing element `i`.
    pub fn scale_of(&self, i: usize) -> f64 {
        self.scales[i / self.block_len()]
    }

    /// Element values: decoded code times block scale.
    pub fn dequantize(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.codes.len()];
        self.dequantize_into(&mut out);
        out
    }

    pub fn dequantize_into(&self, out: &mut [f64]) {
        let bl = self.block_len();
        for (b, (codes, out)) in self.codes.chunks(bl).zip(out.chunks_mut(bl)).enumerate() {
            let s = self.scales[b];
            for (o, &c) in out.iter_mut().zip(codes) {
                // codes are produced by the format itself, so decoding cannot fail
                *o = self.format.decode(c).unwrap_or(0.0) * s;
            }
        }
    }

    fn check_compatible(&self, other: &QuantizedBlock) -> Result<()> {
        if self.codes.len() != other.codes.len() {
            return Err(Error::Shape {
                expected: self.codes.len(),
                got: other.codes.len(),
            });
        }
        if self.format != other.format || self.scheme != other.scheme {
            return Err(Error::usage(format!(
                "cannot compare {} / {} with {} / {}",
                self.format,
                self.scheme.label(),
                other.format,
                other.scheme.label()
            )));
        }
        Ok(())
    }

    /// Elementwise stall indicator between consecutive stored states.
    pub fn stalled_mask(
        &self,
        next: &QuantizedBlock,
        criterion: StallCriterion,
    ) -> Result<Vec<bool>> {
        self.check_compatible(next)?;
        let bl = self.block_len();
        Ok((0..self.codes.len())
            .map(|i| {
                let same_code = self.codes[i] == next.codes[i];
                match criterion {
                    StallCriterion::Code => same_code,
                    StallCriterion::CodeAndScale => {
                        same_code && self.scales[i / bl].to_bits() == next.scales[i / bl].to_bits()
                    }
                }
            })
            .collect())
    }

    /// Fraction of elements whose stored state did not move.
    pub fn stalled_fraction(
        &self,
        next: &QuantizedBlock,
        criterion: StallCriterion,
    ) -> Result<f64> {
        let mask = self.stalled_mask(next, criterion)?;
        if mask.is_empty() {
            return Ok(1.0);
        }
        Ok(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64)
    }

    pub fn to_snapshot(&self) -> Snapshot {
        Snapshot {
            format: self.format,
            scheme: self.scheme,
            block_size: self.block_len(),
            codes: self.codes.clone(),
            scales: self.scales.clone(),
        }
    }

    pub fn from_snapshot(s: Snapshot) -> Result<Self> {
        let format = s.format.validated()?;
        let scheme = s.scheme.validated()?;
        if let Some(bad) = s.codes.iter().find(|&&c| !format.is_valid_code(c)) {
            return Err(Error::usage(format!("invalid code {bad} for {format}")));
        }
        let want = scheme.n_blocks(s.codes.len());
        if s.scales.len() != want {
            return Err(Error::Shape {
                expected: want,
                got: s.scales.len(),
            });
        }
        Ok(QuantizedBlock {
            codes: s.codes,
            scales: s.scales,
            format,
            scheme,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| Error::usage(format!("bad snapshot: {e}")))?;
        QuantizedBlock::from_snapshot(snap)
    }
}

/// Serializable form of a [`QuantizedBlock`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: FpFormat,
    pub scheme: ScalingScheme,
    pub block_size: usize,
    pub codes: Vec<u16>,
    pub scales: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn all_zero_block() {
        let f = FpFormat::FP4_E2M1;
        let q = QuantizedBlock::zeros(10, &f, &ScalingScheme::PerTensor).unwrap();
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(q.scales(), &[1.0]);
        assert!(q.dequantize().iter().all(|&v| v == 0.0));

        let nz = FpFormat::FP4_E2M2U.with_exclude_zero(true);
        let q = QuantizedBlock::zeros(10, &nz, &ScalingScheme::PerTensor).unwrap();
        let smin_code = nz.round_nearest(nz.s_min()).unwrap().code;
        assert!(q.codes().iter().all(|&c| c == smin_code));
        assert!(q.dequantize().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_max_maps_to_format_max() {
        for f in [FpFormat::FP8_E4M3, FpFormat::FP4_E2M1, FpFormat::BF16] {
            for seed in 0..20 {
                let v: Vec<f64> = gaussian(300, seed).iter().map(|x| x * 1e-3).collect();
                let q = quantize_nearest(&v, &f, &ScalingScheme::Blockwise { block_size: 128 })
                    .unwrap();
                for (b, chunk) in v.chunks(128).enumerate() {
                    let imax = chunk
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                        .unwrap()
                        .0;
                    let code = q.codes()[b * 128 + imax];
                    assert_eq!(f.decode(code).unwrap().abs(), f.x_max());
                }
            }
        }
    }

    #[test]
    fn matches_scalar_reference_path() {
        let f = FpFormat::FP4_E2M2U;
        let v: Vec<f64> = gaussian(128, 3).iter().map(|x| x * x).collect();
        let q = quantize_nearest(&v, &f, &ScalingScheme::Blockwise { block_size: 128 }).unwrap();
        let scale = q.scales()[0];
        let deq = q.dequantize();
        for (i, &x) in v.iter().enumerate() {
            let r = f.round_nearest((x / scale).min(f.x_max())).unwrap();
            assert_eq!(q.codes()[i], r.code);
            assert_eq!(deq[i], r.value * scale);
        }
    }

    #[test]
    fn on_grid_vector_round_trips() {
        let f = FpFormat::FP8_E4M3;
        let v: Vec<f64> = f.codes().map(|c| f.decode(c).unwrap()).collect();
        let q = quantize_nearest(&v, &f, &ScalingScheme::PerTensor).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.dequantize(), v);
    }

    #[test]
    fn small_vector_error_bound_sweep() {
        let f = FpFormat::FP4_E2M1;
        let grid: Vec<f64> = (-24..=24).map(|k| k as f64 * 0.25).collect();
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let v = [a, b, c];
                    let q = quantize_nearest(&v, &f, &ScalingScheme::PerTensor).unwrap();
                    let d = q.dequantize();
                    for i in 0..3 {
                        let bound = 0.5 * f.ulp_at(q.codes()[i]).unwrap() * q.scales()[0];
                        assert!((d[i] - v[i]).abs() <= bound * (1.0 + 1e-12), "{v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn stall_masks() {
        let f = FpFormat::FP8_E4M3;
        let v = gaussian(64, 1);
        let q = quantize_nearest(&v, &f, &ScalingScheme::UNSCALED).unwrap();
        assert_eq!(q.stalled_fraction(&q, StallCriterion::Code).unwrap(), 1.0);

        let shifted: Vec<f64> = v.iter().map(|x| x + 4.0 * x.abs().max(1.0)).collect();
        let q2 = quantize_nearest(&shifted, &f, &ScalingScheme::UNSCALED).unwrap();
        assert_eq!(q.stalled_fraction(&q2, StallCriterion::Code).unwrap(), 0.0);

        let mut w = v.clone();
        let changed = [3usize, 17, 40];
        for &i in &changed {
            w[i] = -10.0 - w[i].abs();
        }
        let q3 = quantize_nearest(&w, &f, &ScalingScheme::UNSCALED).unwrap();
        let mask = q.stalled_mask(&q3, StallCriterion::Code).unwrap();
        for (i, m) in mask.iter().enumerate() {
            assert_eq!(*m, !changed.contains(&i));
        }
    }

    #[test]
    fn scale_change_counts_only_under_code_and_scale() {
        let f = FpFormat::FP4_E2M1;
        let a = quantize_nearest(&[1.0, 6.0], &f, &ScalingScheme::PerTensor).unwrap();
        let b = quantize_nearest(&[2.0, 12.0], &f, &ScalingScheme::PerTensor).unwrap();
        assert_eq!(a.codes(), b.codes());
        assert_eq!(a.stalled_fraction(&b, StallCriterion::Code).unwrap(), 1.0);
        assert_eq!(
            a.stalled_fraction(&b, StallCriterion::CodeAndScale)
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn compare_mismatch_is_an_error() {
        let f = FpFormat::FP4_E2M1;
        let a = quantize_nearest(&[1.0, 2.0], &f, &ScalingScheme::PerTensor).unwrap();
        let b = quantize_nearest(&[1.0], &f, &ScalingScheme::PerTensor).unwrap();
        assert!(matches!(
            a.stalled_mask(&b, StallCriterion::Code),
            Err(Error::Shape { .. })
        ));
        let c =
            quantize_nearest(&[1.0, 2.0], &FpFormat::FP8_E4M3, &ScalingScheme::PerTensor).unwrap();
        assert!(a.stalled_mask(&c, StallCriterion::Code).is_err());
    }

    #[test]
    fn rejects_non_finite_and_missing_rng() {
        let f = FpFormat::BF16;
        assert!(matches!(
            quantize_nearest(&[1.0, f64::NAN], &f, &ScalingScheme::PerTensor),
            Err(Error::Domain(_))
        ));
        let r = quantize::<ChaCha8Rng>(
            &[1.0],
            &f,
            &ScalingScheme::PerTensor,
            RoundingMode::Stochastic,
            None,
        );
        assert!(matches!(r, Err(Error::Usage(_))));
        assert!(ScalingScheme::blockwise(0).is_err());
    }

    #[test]
    fn ragged_last_block() {
        let f = FpFormat::FP4_E2M1;
        let v = gaussian(300, 9);
        let q = quantize_nearest(&v, &f, &ScalingScheme::Blockwise { block_size: 128 }).unwrap();
        assert_eq!(q.scales().len(), 3);
        assert_eq!(q.len(), 300);
    }

    #[test]
    fn snapshot_round_trip() {
        let f = FpFormat::FP4_E2M2U.with_exclude_zero(true);
        let v: Vec<f64> = gaussian(200, 5).iter().map(|x| x * x).collect();
        let q = quantize_nearest(&v, &f, &ScalingScheme::Blockwise { block_size: 64 }).unwrap();
        let text = q.to_json();
        assert!(text.contains("\"format\":\"fp4_e2m2u+nozero\""));
        assert_eq!(QuantizedBlock::from_json(&text).unwrap(), q);
        let mut snap = q.to_snapshot();
        snap.scales.pop();
        assert!(QuantizedBlock::from_snapshot(snap).is_err());
    }

    #[test]
    fn parallel_matches_sequential_substreams() {
        let f = FpFormat::FP4_E2M1;
        let v = gaussian(1000, 2);
        let scheme = ScalingScheme::Blockwise { block_size: 128 };
        let par = quantize_par(&v, &f, &scheme, RoundingMode::Stochastic, 77).unwrap();
        let mut codes = Vec::new();
        let mut scales = Vec::new();
        for (b, chunk) in v.chunks(128).enumerate() {
            let mut rng = block_stream(77, b);
            let q = quantize(chunk, &f, &scheme, RoundingMode::Stochastic, Some(&mut rng)).unwrap();
            codes.extend_from_slice(q.codes());
            scales.extend_from_slice(q.scales());
        }
        assert_eq!(par.codes(), &codes[..]);
        assert_eq!(par.scales(), &scales[..]);
    }

    #[test]
    fn sr_conditionally_unbiased_with_fixed_scale() {
        let f = FpFormat::FP4_E2M1;
        let scheme = ScalingScheme::Fixed { scale: 0.5 };
        let x = 0.83;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += quantize(&[x], &f, &scheme, RoundingMode::Stochastic, Some(&mut rng))
                .unwrap()
                .dequantize()[0];
        }
        // neighbours 0.75 and 1.0 on the scaled grid
        let p = (x - 0.75) / 0.25;
        let sigma = 0.25 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((sum / n as f64 - x).abs() < 3.0 * sigma);
    }

    fn any_format() -> impl Strategy<Value = FpFormat> {
        prop::sample::select(vec![
            FpFormat::BF16,
            FpFormat::FP8_E4M3,
            FpFormat::FP4_E2M1,
            FpFormat::FP4_E2M2U.with_exclude_zero(true),
        ])
    }

    fn any_scheme() -> impl Strategy<Value = ScalingScheme> {
        prop_oneof![
            Just(ScalingScheme::PerTensor),
            (1usize..40).prop_map(|b| ScalingScheme::Blockwise { block_size: b }),
        ]
    }

    proptest! {
        #[test]
        fn requantization_is_idempotent(
            f in any_format(),
            scheme in any_scheme(),
            v in prop::collection::vec(0.0f64..1e3, 1..100),
            exp in -20i32..20,
        ) {
            let v: Vec<f64> = v.iter().map(|x| x * 2f64.powi(exp)).collect();
            let q = quantize_nearest(&v, &f, &scheme).unwrap();
            let d = q.dequantize();
            let q2 = quantize_nearest(&d, &f, &scheme).unwrap();
            prop_assert_eq!(q2.codes(), q.codes());
            prop_assert_eq!(q2.dequantize(), d);
        }

        #[test]
        fn positive_rescaling_keeps_codes(
            v in prop::collection::vec(-1e2f64..1e2, 1..64),
            c in 1e-3f64..1e3,
        ) {
            let f = FpFormat::FP8_E4M3;
            let a = quantize_nearest(&v, &f, &ScalingScheme::PerTensor).unwrap();
            let w: Vec<f64> = v.iter().map(|x| x * c).collect();
            let b = quantize_nearest(&w, &f, &ScalingScheme::PerTensor).unwrap();
            prop_assert_eq!(a.codes(), b.codes());
        }

        #[test]
        fn blocks_are_local(
            v in prop::collection::vec(-1e2f64..1e2, 20..80),
            idx in 0usize..16,
            delta in -50.0f64..50.0,
        ) {
            let f = FpFormat::FP4_E2M1;
            let scheme = ScalingScheme::Blockwise { block_size: 16 };
            let a = quantize_nearest(&v, &f, &scheme).unwrap();
            let mut w = v.clone();
            w[idx] += delta;
            let b = quantize_nearest(&w, &f, &scheme).unwrap();
            prop_assert_eq!(&a.codes()[16..], &b.codes()[16..]);
            prop_assert_eq!(&a.scales()[1..], &b.scales()[1..]);
        }
    }
}
