use super::*;
use crate::minifloat::FpFormat;
use crate::quantizer::quantize_nearest;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn cfg(format: FpFormat, scheme: ScalingScheme, rounding: RoundingMode) -> EmaConfig {
    EmaConfig::new(0.999, Storage::quantized(format, scheme), rounding)
}

#[test]
fn signal_equal_to_state_stalls_everything() {
    let mut r = rng(1);
    for (f, scheme) in [
        (FpFormat::BF16, ScalingScheme::UNSCALED),
        (FpFormat::FP8_E4M3, ScalingScheme::PerTensor),
        (
            FpFormat::FP4_E2M1,
            ScalingScheme::Blockwise { block_size: 128 },
        ),
    ] {
        let init = normals(300, &mut r);
        let mut s =
            EmaState::from_values(&init, cfg(f, scheme, RoundingMode::Nearest), Some(&mut r))
                .unwrap();
        let signal = s.values().to_vec();
        let frac = s.step(&signal, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(frac, 1.0, "{}", f.name());
        assert_eq!(s.cycle_step(), 1);
    }
}

#[test]
fn step_validates_inputs() {
    let mut s = EmaState::zeros(
        4,
        cfg(
            FpFormat::BF16,
            ScalingScheme::UNSCALED,
            RoundingMode::Stochastic,
        ),
    )
    .unwrap();
    assert!(matches!(
        s.step(&[1.0; 3], Some(&mut rng(0))),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        s.step(&[1.0, f64::NAN, 0.0, 0.0], Some(&mut rng(0))),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        s.step(&[1.0; 4], None::<&mut ChaCha8Rng>),
        Err(Error::Usage(_))
    ));
    assert!(EmaState::zeros(4, EmaConfig::full(1.0)).is_err());
}

#[test]
fn fp4_unit_variance_stalls_at_theory_rate() {
    // FP4 E2M2u with a frozen unit scale: v = 1 sits on the grid with spacing 0.25
    let mut r = rng(2);
    let n = 2000;
    let c = cfg(
        FpFormat::FP4_E2M2U,
        ScalingScheme::UNSCALED,
        RoundingMode::Nearest,
    );
    let mut s = EmaState::from_values(&vec![1.0; n], c, None::<&mut ChaCha8Rng>).unwrap();
    let mut tail = Vec::new();
    for t in 0..3000 {
        let sig: Vec<f64> = normals(n, &mut r).iter().map(|g| g * g).collect();
        let f = s.step(&sig, None::<&mut ChaCha8Rng>).unwrap();
        if t >= 2000 {
            tail.push(f);
        }
    }
    let measured = tail.iter().sum::<f64>() / tail.len() as f64;
    let rho = crate::theory::rhohat(0.25, 0.999).unwrap();
    assert!(
        (measured - crate::theory::p_stall_nr_ss(rho)).abs() < 0.05,
        "{measured}"
    );
}

/// Analytic gate: with nearest rounding the stored point `x` survives a move
/// of `delta` iff `|delta|` is below half the spacing towards the move, with
/// ties going to the even code.
fn gate_predicts_stall(f: &FpFormat, code: u16, x: f64, delta: f64) -> bool {
    if delta == 0.0 {
        return true;
    }
    let mag = x.abs();
    let outward = (delta > 0.0) == (x > 0.0 || (x == 0.0 && delta > 0.0));
    let spacing = if outward {
        if mag == f.x_max() {
            return true;
        }
        f.ulp_at(code).unwrap()
    } else {
        let below = f
            .codes()
            .map(|c| f.decode(c).unwrap().abs())
            .filter(|&v| v < mag)
            .fold(0.0, f64::max);
        mag - below
    };
    let half = spacing / 2.0;
    if x == 0.0 && !f.is_signed() && delta < 0.0 {
        return true;
    }
    if x == 0.0 && f.is_signed() {
        // zero moves only if the proposal clears half the first spacing
        return delta.abs() < half || (delta.abs() == half && code.is_multiple_of(2));
    }
    delta.abs() < half
        || (delta.abs() == half && code & ((1 << (f.exp_bits + f.mant_bits)) - 1) & 1 == 0)
}

#[test]
fn nearest_gate_matches_half_spacing_condition_exhaustively() {
    for f in [FpFormat::FP4_E2M2U, FpFormat::FP4_E2M1] {
        // dyadic decays and signals keep every product exact
        for beta in [0.75, 1.0 - 2f64.powi(-4), 1.0 - 2f64.powi(-10)] {
            let c = EmaConfig::new(
                beta,
                Storage::quantized(f, ScalingScheme::UNSCALED),
                RoundingMode::Nearest,
            );
            let lo = if f.is_signed() { -8.0 } else { 0.0 };
            let signals: Vec<f64> = (0..)
                .map(|i| lo + i as f64 * 2f64.powi(-6))
                .take_while(|&s| s <= 8.0)
                .collect();
            for code in f.codes() {
                let x = f.decode(code).unwrap();
                for &sig in &signals {
                    let mut s = EmaState::from_values(&[x], c, None::<&mut ChaCha8Rng>).unwrap();
                    let stalled = s.step(&[sig], None::<&mut ChaCha8Rng>).unwrap() == 1.0;
                    let delta = (1.0 - beta) * (sig - x);
                    let proposal_exact = beta * x + (1.0 - beta) * sig == x + delta;
                    assert!(proposal_exact);
                    assert_eq!(
                        stalled,
                        gate_predicts_stall(&f, code, x, delta),
                        "{} beta {beta} x {x} signal {sig}",
                        f.name()
                    );
                }
            }
        }
    }
}

#[test]
fn skip_probability_extremes_and_rate() {
    let c = cfg(
        FpFormat::FP8_E4M3,
        ScalingScheme::PerTensor,
        RoundingMode::Stochastic,
    );
    let mut a = EmaState::zeros(64, c).unwrap();
    let mut b = a.clone();
    let (mut ra, mut rb) = (rng(3), rng(3));
    let mut sig_rng = rng(4);
    for _ in 0..50 {
        let sig = normals(64, &mut sig_rng);
        let fa = a.step(&sig, Some(&mut ra)).unwrap();
        let out = b.skip_step(&sig, 0.0, &mut rb).unwrap();
        assert!(!out.skipped);
        assert_eq!(fa, out.stalled_fraction);
    }
    assert_eq!(a.values(), b.values());

    let frozen = a.values().to_vec();
    for _ in 0..100 {
        let sig = normals(64, &mut sig_rng);
        assert!(a.skip_step(&sig, 1.0, &mut ra).unwrap().skipped);
    }
    assert_eq!(a.values(), &frozen[..]);
    assert!(a.skip_step(&[0.0; 64], 1.5, &mut ra).is_err());

    let mut s = EmaState::zeros(4, EmaConfig::full(0.9)).unwrap();
    let n = 10_000;
    let skipped = (0..n)
        .filter(|_| s.skip_step(&[1.0; 4], 0.5, &mut ra).unwrap().skipped)
        .count() as f64;
    let sigma = (0.25 / n as f64).sqrt();
    assert!((skipped / n as f64 - 0.5).abs() < 3.0 * sigma);
}

#[test]
fn resets_follow_policy() {
    let c = cfg(
        FpFormat::FP8_E4M3,
        ScalingScheme::PerTensor,
        RoundingMode::Nearest,
    );
    let mut s = EmaState::zeros(8, c).unwrap();
    let mut p = Periodic { period: 5 };
    let mut resets = Vec::new();
    for step in 1..=6 {
        let f = s.step(&[1.0; 8], None::<&mut ChaCha8Rng>).unwrap();
        if s.apply_reset_policy(&mut p, f).unwrap() {
            resets.push(step);
            assert_eq!(s.cycle_step(), 0);
            assert!(s.values().iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(resets, vec![5]);
    assert_eq!(s.cycle_step(), 1);

    let mut a = Adaptive::new(0.6, 1.0, 0.999).unwrap();
    s.reset().unwrap();
    s.step(&[1.0; 8], None::<&mut ChaCha8Rng>).unwrap();
    assert!(s.apply_reset_policy(&mut a, 1.0).unwrap());
    assert_eq!(a.accumulated(), 0.0);
}

#[test]
fn reset_without_zero_code_reads_back_zero() {
    let f = FpFormat::FP4_E2M2U.with_exclude_zero(true);
    let c = cfg(
        f,
        ScalingScheme::Blockwise { block_size: 4 },
        RoundingMode::Nearest,
    );
    let mut s =
        EmaState::from_values(&[1.0, 2.0, 3.0, 0.5, 4.0], c, None::<&mut ChaCha8Rng>).unwrap();
    s.reset().unwrap();
    assert!(s.values().iter().all(|&v| v == 0.0));
    let Stored::Quantized(q) = s.stored() else {
        panic!()
    };
    assert!(q
        .codes()
        .iter()
        .all(|&code| f.decode(code).unwrap() == f.s_min()));
}

fn run_trace(c: EmaConfig, scale: f64, seed: u64) -> (StallTrace, Vec<Vec<u16>>) {
    let mut r = rng(seed);
    let mut sr = rng(seed + 1);
    let mut s = EmaState::zeros(256, c).unwrap();
    let mut trace = StallTrace::new("v");
    let mut codes = Vec::new();
    for _ in 0..300 {
        let sig: Vec<f64> = normals(256, &mut r).iter().map(|g| g * g * scale).collect();
        let f = s.step(&sig, Some(&mut sr)).unwrap();
        trace.push(f, s.cycle_step(), false);
        if let Stored::Quantized(q) = s.stored() {
            codes.push(q.codes().to_vec());
        }
    }
    (trace, codes)
}

#[test]
fn replay_is_bit_identical() {
    for rounding in [RoundingMode::Nearest, RoundingMode::Stochastic] {
        let c = cfg(
            FpFormat::FP4_E2M2U,
            ScalingScheme::Blockwise { block_size: 128 },
            rounding,
        );
        assert_eq!(run_trace(c, 1.0, 9), run_trace(c, 1.0, 9));
    }
}

#[test]
fn per_tensor_scaling_is_equivariant() {
    for rounding in [RoundingMode::Nearest, RoundingMode::Stochastic] {
        let c = cfg(FpFormat::FP8_E4M3, ScalingScheme::PerTensor, rounding);
        let base = run_trace(c, 1.0, 5);
        for scale in [0.25, 8.0, 2f64.powi(-20)] {
            assert_eq!(run_trace(c, scale, 5), base, "scale {scale}");
        }
    }
}

/// Fits the relaxation rate of the mean state toward `target` by least squares on
/// `log|target - mean|`.
fn fitted_rate(means: &[f64], target: f64) -> f64 {
    let pts: Vec<(f64, f64)> = means
        .iter()
        .enumerate()
        .map(|(i, m)| ((i + 1) as f64, (target - m).abs().ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    -sxy / sxx
}

fn relaxation(c: EmaConfig, p_skip: f64, seed: u64) -> (f64, f64) {
    let n = 20_000;
    let target = 2.0;
    let mut r = rng(seed);
    let mut s = EmaState::from_values(&vec![1.0; n], c, None::<&mut ChaCha8Rng>).unwrap();
    let mut means = Vec::new();
    let mut stalled = 0.0;
    let steps = 3000;
    for _ in 0..steps {
        let sig: Vec<f64> = normals(n, &mut r).iter().map(|g| target * g * g).collect();
        stalled += s.skip_step(&sig, p_skip, &mut r).unwrap().stalled_fraction;
        means.push(s.values().iter().sum::<f64>() / n as f64);
    }
    (fitted_rate(&means, target), stalled / steps as f64)
}

#[test]
fn effective_decay_matches_signal_independent_stalls() {
    // forced skips on exact storage
    let (rate, p) = relaxation(EmaConfig::full(0.999), 0.5, 11);
    let want = 1.0 - crate::theory::effective_decay(0.999, p).unwrap().beta_eff;
    assert!(
        (rate / want - 1.0).abs() < 0.10,
        "rate {rate} want {want} p {p}"
    );

    // a fine 15-bit grid where nearest-rounding stalls are rare
    let fine = FpFormat::new(0, 4, 11, 7).unwrap();
    let c = cfg(fine, ScalingScheme::UNSCALED, RoundingMode::Nearest);
    let (rate, p) = relaxation(c, 0.0, 12);
    let want = 1.0 - crate::theory::effective_decay(0.999, p).unwrap().beta_eff;
    assert!(p > 0.01);
    assert!(
        (rate / want - 1.0).abs() < 0.10,
        "rate {rate} want {want} p {p}"
    );
}

#[test]
fn stall_trace_csv() {
    let mut t = StallTrace::new("v");
    t.push(0.5, 1, false);
    t.push(0.75, 2, true);
    assert_eq!(t.reset_steps(), vec![2]);
    let mut buf = Vec::new();
    write_traces_csv(&[t], &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "step,tensor_id,stalled_fraction,cycle_k,reset_flag\n1,v,0.5,1,0\n2,v,0.75,2,1\n"
    );
}

// ---- Adam ----

fn quad_grad(x: &[f64], h: &[f64]) -> Vec<f64> {
    x.iter().zip(h).map(|(x, h)| h * (x - 1.0)).collect()
}

#[test]
fn full_precision_adam_matches_reference() {
    let n = 16;
    let h: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.3).collect();
    let hyper = AdamHyper {
        lr: 0.05,
        weight_decay: 0.01,
        ..AdamHyper::default()
    };
    let mut opt = AdamOptimizer::full(n, hyper).unwrap();
    let mut x = vec![0.0; n];
    let mut r = rng(0);

    let (mut xr, mut m, mut v) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for t in 1..=100 {
        let g = quad_grad(&x, &h);
        opt.step(&mut x, &g, 1.0, &mut r).unwrap();

        let g = quad_grad(&xr, &h);
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            xr[i] -= 0.05 * (mh / (vh.sqrt() + 1e-6) + 0.01 * xr[i]);
        }
    }
    for i in 0..n {
        assert!((x[i] - xr[i]).abs() < 1e-6, "{i}: {} vs {}", x[i], xr[i]);
    }
}

#[test]
fn zero_gradients_only_decay_weights() {
    let hyper = AdamHyper {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamHyper::default()
    };
    let st = Storage::quantized(FpFormat::FP8_E4M3, ScalingScheme::PerTensor);
    let mut opt = AdamOptimizer::new(3, hyper, st, st, RoundingMode::Nearest).unwrap();
    let mut x = vec![1.0, -2.0, 4.0];
    let mut want = x.clone();
    let mut r = rng(0);
    for _ in 0..10 {
        want.iter_mut().for_each(|w| *w *= 1.0 - 0.1 * 0.5);
        let s = opt.step(&mut x, &[0.0; 3], 1.0, &mut r).unwrap();
        assert_eq!(s.m_stalled, 1.0);
        assert_eq!(s.v_stalled, 1.0);
    }
    assert_eq!(x, want);
    assert!(opt.m().values().iter().all(|&v| v == 0.0));
}

#[test]
fn first_step_moments_within_half_spacing() {
    let g = [0.3, -1.7, 2.2, 0.01];
    let st = Storage::quantized(FpFormat::FP8_E4M3, ScalingScheme::PerTensor);
    let mut opt =
        AdamOptimizer::new(4, AdamHyper::default(), st, st, RoundingMode::Nearest).unwrap();
    let mut x = [0.0; 4];
    opt.step(&mut x, &g, 1.0, &mut rng(0)).unwrap();
    for (state, want) in [
        (opt.m(), g.map(|g| (1.0 - 0.9) * g)),
        (opt.v(), g.map(|g| (1.0 - 0.999) * (g * g))),
    ] {
        assert_eq!(state.proposal(), &want[..]);
        let Stored::Quantized(q) = state.stored() else {
            panic!()
        };
        for i in 0..4 {
            let half = 0.5 * q.format().ulp_at(q.codes()[i]).unwrap() * q.scale_of(i);
            assert!((state.values()[i] - want[i]).abs() <= half);
        }
    }
}

#[test]
fn local_clock_restarts_bias_correction() {
    let st = Storage::quantized(FpFormat::BF16, ScalingScheme::UNSCALED);
    let build = |global| {
        let hyper = AdamHyper {
            global_bias_clock: global,
            ..AdamHyper::default()
        };
        AdamOptimizer::new(2, hyper, st, st, RoundingMode::Nearest)
            .unwrap()
            .with_resets(
                Box::new(Periodic { period: 3 }),
                Box::new(Periodic { period: 3 }),
            )
    };
    let mut local = build(false);
    let mut global = build(true);
    let mut r = rng(0);
    let mut x = [0.0; 2];
    let ks: Vec<u64> = (0..7)
        .map(|_| local.step(&mut x, &[1.0, 1.0], 1.0, &mut r).unwrap().v_k)
        .collect();
    assert_eq!(ks, vec![1, 2, 3, 1, 2, 3, 1]);
    let ks: Vec<u64> = (0..4)
        .map(|_| global.step(&mut x, &[1.0, 1.0], 1.0, &mut r).unwrap().v_k)
        .collect();
    assert_eq!(ks, vec![1, 2, 3, 4]);
}

proptest! {
    #[test]
    fn stored_state_is_write_read_stable(
        seed in any::<u64>(),
        which in 0usize..4,
        sr in any::<bool>(),
        steps in 1usize..20,
    ) {
        let (f, scheme) = [
            (FpFormat::BF16, ScalingScheme::UNSCALED),
            (FpFormat::FP8_E4M3, ScalingScheme::PerTensor),
            (FpFormat::FP4_E2M1, ScalingScheme::Blockwise { block_size: 16 }),
            (FpFormat::FP4_E2M2U.with_exclude_zero(true), ScalingScheme::Blockwise { block_size: 16 }),
        ][which];
        let mode = if sr { RoundingMode::Stochastic } else { RoundingMode::Nearest };
        let mut s = EmaState::zeros(40, EmaConfig::new(0.9, Storage::quantized(f, scheme), mode)).unwrap();
        let mut r = rng(seed);
        for _ in 0..steps {
            let mut sig = normals(40, &mut r);
            if !f.is_signed() {
                sig.iter_mut().for_each(|x| *x = *x * *x);
            }
            s.step(&sig, Some(&mut r)).unwrap();
        }
        let Stored::Quantized(q) = s.stored() else { panic!() };
        let again = quantize_nearest(&q.dequantize(), &f, &scheme).unwrap();
        prop_assert_eq!(&again, q);
    }
}
