use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::problems::ProblemSpec;
use super::train::{train_run, RunSpec, StatePrecision, TrainConfig, TrainOutcome};
use super::{iqr, median, num, ExperimentResult, LossCurve};
use crate::ema::{Moment, ResetPolicy, ResetRegistry, Storage};
use crate::error::{Error, Result};
use crate::minifloat::RoundingMode;
use crate::theory::{reset_period_kstar, TheoryInputs};

fn check_seeds(seeds: &[u64], min: usize) -> Result<()> {
    if seeds.len() < min {
        return Err(Error::usage(format!(
            "need at least {min} seeds, got {}",
            seeds.len()
        )));
    }
    Ok(())
}

fn loss_curve(label: String, seed: u64, out: &TrainOutcome) -> LossCurve {
    LossCurve {
        label,
        seed,
        points: out.loss_curve.clone(),
    }
}

/// Full-precision Adam with forced skips of one moment after warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipStudyConfig {
    pub problem: ProblemSpec,
    pub train: TrainConfig,
    pub p_skips: Vec<f64>,
    pub targets: Vec<Moment>,
    pub seeds: Vec<u64>,
}

impl Default for SkipStudyConfig {
    fn default() -> Self {
        SkipStudyConfig {
            problem: ProblemSpec::noisy_quadratic(),
            train: TrainConfig::default(),
            p_skips: vec![0.0, 0.5, 0.9, 0.99],
            targets: vec![Moment::First, Moment::Second],
            seeds: (0..5).collect(),
        }
    }
}

fn moment_name(m: Moment) -> &'static str {
    match m {
        Moment::First => "first",
        Moment::Second => "second",
    }
}

/// Summary keys: `median[<target>,p=<p>]` per cell and, when both targets
/// include `p = 0.9`, `first_worse_at_0.9`.
pub fn run_skip_study(cfg: &SkipStudyConfig) -> Result<ExperimentResult> {
    let start = std::time::Instant::now();
    cfg.train.validate()?;
    check_seeds(&cfg.seeds, 1)?;
    if cfg.p_skips.is_empty() || cfg.targets.is_empty() {
        return Err(Error::usage(
            "skip study needs at least one probability and one target",
        ));
    }
    if let Some(p) = cfg.p_skips.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::usage(format!(
            "skip probability must lie in [0, 1], got {p}"
        )));
    }
    let none = ResetPolicy::none();
    let full = StatePrecision::preset("full")?;
    let jobs: Vec<(Moment, f64, u64)> = cfg
        .targets
        .iter()
        .flat_map(|&t| {
            cfg.p_skips
                .iter()
                .flat_map(move |&p| cfg.seeds.iter().map(move |&s| (t, p, s)))
        })
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(target, p, seed)| {
            train_run(&RunSpec {
                problem: &cfg.problem,
                train: &cfg.train,
                precision: full,
                rounding: RoundingMode::Nearest,
                policy: &none,
                skip: (p > 0.0).then_some((target, p)),
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r = ExperimentResult::new(
        "skip_study",
        cfg,
        &["target", "p_skip", "seed", "final_loss"],
    )?;
    for (&(target, p, seed), out) in jobs.iter().zip(&outcomes) {
        r.rows.push(vec![
            moment_name(target).into(),
            num(p),
            seed.into(),
            num(out.final_loss),
        ]);
        r.loss_curves.push(loss_curve(
            format!("{}/p={p}", moment_name(target)),
            seed,
            out,
        ));
    }
    let cell_median = |target: Moment, p: f64| {
        let losses: Vec<f64> = jobs
            .iter()
            .zip(&outcomes)
            .filter(|((t, q, _), _)| *t == target && *q == p)
            .map(|(_, o)| o.final_loss)
            .collect();
        median(&losses)
    };
    for &t in &cfg.targets {
        for &p in &cfg.p_skips {
            r.summary.insert(
                format!("median[{},p={p}]", moment_name(t)),
                num(cell_median(t, p)),
            );
        }
    }
    let has = |t| cfg.targets.contains(&t) && cfg.p_skips.contains(&0.9);
    if has(Moment::First) && has(Moment::Second) {
        let worse = cell_median(Moment::First, 0.9) > cell_median(Moment::Second, 0.9);
        r.summary
            .insert("first_worse_at_0.9".into(), Value::from(worse));
    }
    r.wall_time_s = start.elapsed().as_secs_f64();
    Ok(r)
}

/// One configuration of the reset study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    /// A [`StatePrecision`] preset name.
    pub precision: String,
    pub rounding: RoundingMode,
    pub policy: ResetPolicy,
}

impl ArmSpec {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.precision,
            self.rounding,
            self.policy.label()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetStudyConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub arms: Vec<ArmSpec>,
    pub seeds: Vec<u64>,
}

impl ResetStudyConfig {
    /// Every precision x rounding x policy combination. Full precision gets a
    /// single rounding arm since nothing is rounded.
    pub fn grid(
        problem: ProblemSpec,
        train: TrainConfig,
        precisions: &[&str],
        roundings: &[RoundingMode],
        policies: &[ResetPolicy],
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let mut arms = Vec::new();
        for &p in precisions {
            let full = StatePrecision::preset(p)?.is_full();
            for (i, &rounding) in roundings.iter().enumerate() {
                if full && i > 0 {
                    break;
                }
                for policy in policies {
                    arms.push(ArmSpec {
                        precision: p.to_string(),
                        rounding,
                        policy: policy.clone(),
                    });
                }
            }
        }
        Ok(ResetStudyConfig {
            problem,
            train,
            arms,
            seeds,
        })
    }
}

/// Per-arm statistics over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub arm: ArmSpec,
    pub median: f64,
    pub iqr: f64,
    pub mean: f64,
    pub losses: Vec<f64>,
    pub v_stalled_mean: f64,
}

/// Periodic reset at the theory period for the second-moment format of a
/// precision preset.
pub fn kstar_policy(precision: &str, beta2: f64, s0: f64) -> Result<ResetPolicy> {
    match StatePrecision::preset(precision)?.v {
        Storage::Full => Err(Error::usage("full precision has no theory reset period")),
        Storage::Quantized { format, .. } => {
            let k = reset_period_kstar(&TheoryInputs::new(beta2, format).with_s0(s0))?;
            Ok(ResetPolicy::periodic(k))
        }
    }
}

/// Final-loss matrix over arms and seeds.
///
/// Summary keys: `arms` (a list of [`ArmSummary`]), `best` (label of the arm
/// with the lowest median) and `winner[<precision>/<rounding>]` per group.
pub fn run_reset_study(cfg: &ResetStudyConfig) -> Result<ExperimentResult> {
    let start = std::time::Instant::now();
    cfg.train.validate()?;
    check_seeds(&cfg.seeds, 3)?;
    if cfg.arms.is_empty() {
        return Err(Error::usage("reset study needs at least one arm"));
    }
    let registry = ResetRegistry::default();
    let mut precisions = Vec::new();
    for arm in &cfg.arms {
        registry.build(&arm.policy)?;
        precisions.push(StatePrecision::preset(&arm.precision)?);
    }
    let jobs: Vec<(usize, u64)> = (0..cfg.arms.len())
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let arm = &cfg.arms[a];
            train_run(&RunSpec {
                problem: &cfg.problem,
                train: &cfg.train,
                precision: precisions[a],
                rounding: arm.rounding,
                policy: &arm.policy,
                skip: None,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut r = ExperimentResult::new(
        "reset_study",
        cfg,
        &[
            "precision",
            "rounding",
            "policy",
            "seed",
            "final_loss",
            "m_stalled_mean",
            "v_stalled_mean",
            "resets",
        ],
    )?;
    for (&(a, seed), out) in jobs.iter().zip(&outcomes) {
        let arm = &cfg.arms[a];
        r.rows.push(vec![
            arm.precision.clone().into(),
            arm.rounding.as_str().into(),
            arm.policy.label().into(),
            seed.into(),
            num(out.final_loss),
            num(out.m_stalled_mean),
            num(out.v_stalled_mean),
            out.resets.into(),
        ]);
        r.loss_curves.push(loss_curve(arm.label(), seed, out));
    }

    let per = cfg.seeds.len();
    let summaries: Vec<ArmSummary> = cfg
        .arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let runs = &outcomes[a * per..(a + 1) * per];
            let losses: Vec<f64> = runs.iter().map(|o| o.final_loss).collect();
            ArmSummary {
                label: arm.label(),
                arm: arm.clone(),
                median: median(&losses),
                iqr: iqr(&losses),
                mean: losses.iter().sum::<f64>() / per as f64,
                v_stalled_mean: runs.iter().map(|o| o.v_stalled_mean).sum::<f64>() / per as f64,
                losses,
            }
        })
        .collect();

    let best = summaries
        .iter()
        .min_by(|a, b| a.median.total_cmp(&b.median))
        .map(|s| s.label.clone())
        .unwrap_or_default();
    r.summary.insert("best".into(), best.into());
    let mut groups: Vec<(String, &ArmSummary)> = Vec::new();
    for s in &summaries {
        let key = format!("{}/{}", s.arm.precision, s.arm.rounding);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, w)) if s.median < w.median => *w = s,
            Some(_) => {}
            None => groups.push((key, s)),
        }
    }
    for (key, w) in groups {
        r.summary
            .insert(format!("winner[{key}]"), w.arm.policy.label().into());
    }
    r.summary.insert(
        "arms".into(),
        serde_json::to_value(&summaries).map_err(|e| Error::io("arm summary", e))?,
    );
    r.wall_time_s = start.elapsed().as_secs_f64();
    Ok(r)
}

impl ExperimentResult {
    /// Per-arm statistics of a reset study.
    pub fn arm_summaries(&self) -> Result<Vec<ArmSummary>> {
        let v = self.summary.get("arms").ok_or_else(|| {
            Error::usage(format!("`{}` result has no arm summaries", self.experiment))
        })?;
        serde_json::from_value(v.clone()).map_err(|e| Error::io("arm summary", e))
    }
}
