use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use qema::ema::{AdamHyper, EmaConfig, Moment, ResetPolicy, Storage};
use qema::simlab::{
    kstar_policy, run_first_moment_curve, run_reset_study, run_skip_study, run_stall_curve,
    ArmSpec, CurveConfig, ExperimentResult, GradientStreamSpec, ProblemSpec, ResetStudyConfig,
    SkipStudyConfig, StatePrecision, TrainConfig,
};
use qema::theory::{
    default_p_init, p_stall_nr_ss, p_stall_sr_ss, reset_period_kstar, rhohat, startup_window,
    TheoryInputs,
};
use qema::{Error, FpFormat, Result, RoundingMode, ScalingScheme};

use crate::config::{
    self, resolve, Curve, PredictPeriod, PredictStall, PredictWindow, ResetStudy, SkipStudy,
};
use crate::{Cli, Command};

/// Environment variable naming the default experiment output directory.
pub const OUT_DIR_ENV: &str = "QEMA_OUT_DIR";

pub fn run(cli: &Cli) -> Result<()> {
    let file = cli
        .config
        .as_deref()
        .map(config::read_config_file)
        .transpose()?;
    let file = file.as_ref();
    match &cli.command {
        Command::PredictStall(f) => {
            let c: PredictStall = resolve(&PredictStall::default(), f, file)?;
            announce("predict-stall", &c);
            emit_table(cli, "predict-stall", &predict_stall(&c)?)
        }
        Command::PredictWindow(f) => {
            let mut c: PredictWindow = resolve(&PredictWindow::default(), f, file)?;
            let formats = parse_formats(&c.format)?;
            if c.p_init.is_empty() {
                c.p_init = formats.iter().map(default_p_init).collect();
            }
            announce("predict-window", &c);
            emit_table(cli, "predict-window", &predict_window(&c, &formats)?)
        }
        Command::PredictPeriod(f) => {
            let c: PredictPeriod = resolve(&PredictPeriod::default(), f, file)?;
            announce("predict-period", &c);
            emit_table(cli, "predict-period", &predict_period(&c)?)
        }
        Command::StallCurve(f) | Command::FirstMoment(f) => {
            let first = matches!(cli.command, Command::FirstMoment(_));
            let preset = f.preset.unwrap_or_default();
            let base = if first {
                Curve::first_moment_preset(preset)
            } else {
                Curve::stall_preset(preset)
            };
            let mut c: Curve = resolve(&base, f, file)?;
            let cfg = curve_config(&mut c)?;
            let name = if first { "first-moment" } else { "stall-curve" };
            announce(name, &c);
            let result = if first {
                run_first_moment_curve(&cfg)?
            } else {
                run_stall_curve(&cfg)?
            };
            let path = write_experiment(cli, name, &c, &result)?;
            let mut line = format!(
                "{name} format={} rounding={} seed={}: floor={:.4} plateau={:.4}",
                c.format,
                c.rounding,
                c.seed,
                metric(&result, "floor"),
                metric(&result, "plateau"),
            );
            if !first {
                line.push_str(&format!(
                    " theory={:.4} gap={:+.4} monotone_rise={}",
                    metric(&result, "theory_plateau"),
                    metric(&result, "plateau_gap"),
                    result.summary["monotone_rise"],
                ));
            }
            finish(&line, &result, &path);
            Ok(())
        }
        Command::SkipStudy(f) => {
            let c: SkipStudy = resolve(&SkipStudy::preset(f.preset.unwrap_or_default()), f, file)?;
            announce("skip-study", &c);
            let result = run_skip_study(&skip_config(&c)?)?;
            let path = write_experiment(cli, "skip-study", &c, &result)?;
            let cells: Vec<String> = result
                .summary
                .iter()
                .filter(|(k, _)| k.starts_with("median["))
                .map(|(k, v)| format!("{k}={}", fmt_value(v)))
                .collect();
            let mut line = format!("skip-study seeds={:?}: {}", c.seeds.0, cells.join(" "));
            if let Some(v) = result.summary.get("first_worse_at_0.9") {
                line.push_str(&format!(" first_worse_at_0.9={v}"));
            }
            finish(&line, &result, &path);
            Ok(())
        }
        Command::ResetStudy(f) => {
            let mut c: ResetStudy =
                resolve(&ResetStudy::preset(f.preset.unwrap_or_default()), f, file)?;
            let cfg = reset_config(&mut c)?;
            announce("reset-study", &c);
            let result = run_reset_study(&cfg)?;
            let path = write_experiment(cli, "reset-study", &c, &result)?;
            finish(&reset_summary(&c, &result)?, &result, &path);
            Ok(())
        }
    }
}

/// Prints the fully resolved configuration.
fn announce(name: &str, config: &impl Serialize) {
    let text = serde_json::to_string(config).unwrap_or_default();
    eprintln!("{name} config: {text}");
}

fn finish(line: &str, result: &ExperimentResult, path: &Path) {
    println!("{line} ({:.1}s) -> {}", result.wall_time_s, path.display());
}

fn metric(r: &ExperimentResult, key: &str) -> f64 {
    r.metric(key).unwrap_or(f64::NAN)
}

fn fmt_value(v: &Value) -> String {
    v.as_f64()
        .map_or_else(|| v.to_string(), |x| format!("{x:.4}"))
}

fn parse_formats(names: &[String]) -> Result<Vec<FpFormat>> {
    if names.is_empty() {
        return Err(Error::Usage("no formats given".into()));
    }
    names.iter().map(|n| FpFormat::from_name(n)).collect()
}

fn parse_rounding(s: &str) -> Result<RoundingMode> {
    s.parse()
}

/// Resolves `auto` to the scheme each format family is normally stored with.
fn parse_scheme(s: &str, format: &FpFormat) -> Result<ScalingScheme> {
    let bad = || {
        Error::Usage(format!(
            "unknown scheme `{s}` (auto, unscaled, per-tensor, block:<n>, fixed:<scale>)"
        ))
    };
    let scheme = match s {
        "auto" => match format.bit_width() {
            w if w > 8 => ScalingScheme::UNSCALED,
            w if w > 4 => ScalingScheme::PerTensor,
            _ => ScalingScheme::Blockwise { block_size: 128 },
        },
        "unscaled" => ScalingScheme::UNSCALED,
        "per-tensor" => ScalingScheme::PerTensor,
        _ => match s.split_once(':') {
            Some(("block", n)) => ScalingScheme::Blockwise {
                block_size: n.parse().map_err(|_| bad())?,
            },
            Some(("fixed", x)) => ScalingScheme::Fixed {
                scale: x.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        },
    };
    scheme.validated()
}

fn scheme_name(s: &ScalingScheme) -> String {
    match s {
        ScalingScheme::Fixed { scale } if *scale == 1.0 => "unscaled".into(),
        ScalingScheme::Fixed { scale } => format!("fixed:{scale}"),
        ScalingScheme::PerTensor => "per-tensor".into(),
        ScalingScheme::Blockwise { block_size } => format!("block:{block_size}"),
    }
}

/// A plain table written as CSV, or as a JSON array of row objects.
struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: Vec<String>) -> Self {
        Table {
            columns,
            rows: Vec::new(),
        }
    }

    fn to_csv(&self) -> Result<String> {
        let io = |e: csv::Error| Error::Io(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            }))
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                Value::Object(
                    self.columns
                        .iter()
                        .cloned()
                        .zip(r.iter().cloned())
                        .collect::<Map<_, _>>(),
                )
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&rows).expect("table serializes");
        s.push('\n');
        s
    }
}

fn emit_table(cli: &Cli, name: &str, table: &Table) -> Result<()> {
    let (text, ext) = if cli.json {
        (table.to_json(), "json")
    } else {
        (table.to_csv()?, "csv")
    };
    print!("{text}");
    std::io::stdout()
        .flush()
        .map_err(|e| Error::Io(e.to_string()))?;
    if let Some(dir) = &cli.out {
        let path = dir.join(format!("{name}.{ext}"));
        write_file(&path, text.as_bytes())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("qema-out"))
}

/// Writes `<name>.csv` (or `.json`) plus `<name>.config.json`; returns the data file path.
fn write_experiment(
    cli: &Cli,
    name: &str,
    config: &impl Serialize,
    result: &ExperimentResult,
) -> Result<PathBuf> {
    let dir = out_dir(cli);
    let data = if cli.json {
        let p = dir.join(format!("{name}.json"));
        write_file(&p, result.to_json().as_bytes())?;
        p
    } else {
        let mut buf = Vec::new();
        result.write_csv(&mut buf)?;
        let p = dir.join(format!("{name}.csv"));
        write_file(&p, &buf)?;
        p
    };
    let mut cfg = serde_json::to_string_pretty(config).map_err(|e| Error::Io(e.to_string()))?;
    cfg.push('\n');
    write_file(&dir.join(format!("{name}.config.json")), cfg.as_bytes())?;
    Ok(data)
}

fn predict_stall(c: &PredictStall) -> Result<Table> {
    let formats = parse_formats(&c.format)?;
    let mut t = Table::new(
        ["format", "eps", "rhohat", "p_nr", "p_sr"]
            .map(String::from)
            .to_vec(),
    );
    for f in formats {
        let rho = rhohat(f.epsilon(), c.beta2)?;
        t.rows.push(vec![
            f.name().into(),
            f.epsilon().into(),
            rho.into(),
            p_stall_nr_ss(rho).into(),
            p_stall_sr_ss(rho).into(),
        ]);
    }
    Ok(t)
}

fn predict_window(c: &PredictWindow, formats: &[FpFormat]) -> Result<Table> {
    if c.p0.is_empty() {
        return Err(Error::Usage("no P0 values given".into()));
    }
    if c.p_init.len() != formats.len() {
        return Err(Error::Usage(format!(
            "--p-init needs one value per format ({} formats, {} values)",
            formats.len(),
            c.p_init.len()
        )));
    }
    let mut columns = vec!["format".to_string(), "p_init".to_string()];
    columns.extend(c.p0.iter().map(|p| format!("jstar@{p}")));
    let mut t = Table::new(columns);
    for (f, &p_init) in formats.iter().zip(&c.p_init) {
        let inputs = TheoryInputs::new(c.beta2, *f).with_p_init(p_init);
        inputs.validate()?;
        let mut row = vec![f.name().into(), p_init.into()];
        for &p0 in &c.p0 {
            row.push(match startup_window(p0, &inputs) {
                Ok(j) => j.into(),
                Err(Error::ThresholdUnreachable { .. }) => "unreachable".into(),
                Err(e) => return Err(e),
            });
        }
        t.rows.push(row);
    }
    Ok(t)
}

fn predict_period(c: &PredictPeriod) -> Result<Table> {
    let formats = parse_formats(&c.format)?;
    if c.s0.is_empty() {
        return Err(Error::Usage("no s0 values given".into()));
    }
    if let Some(s) = c.s0.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Usage(format!("s0 must lie in [0, 1), got {s}")));
    }
    let mut columns = vec!["format".to_string()];
    columns.extend(c.s0.iter().map(|s| format!("kstar@{s}")));
    let mut t = Table::new(columns);
    for f in formats {
        let mut row = vec![f.name().into()];
        for &s0 in &c.s0 {
            row.push(
                match reset_period_kstar(&TheoryInputs::new(c.beta2, f).with_s0(s0)) {
                    Ok(k) => k.into(),
                    Err(Error::Domain(_)) => "unreachable".into(),
                    Err(e) => return Err(e),
                },
            );
        }
        t.rows.push(row);
    }
    Ok(t)
}

/// Builds the simulation config and rewrites `c` with canonical names.
fn curve_config(c: &mut Curve) -> Result<CurveConfig> {
    let rounding = parse_rounding(&c.rounding)?;
    c.rounding = rounding.as_str().into();
    let storage = if c.format == "full" {
        c.scheme = "none".into();
        Storage::Full
    } else {
        let format = FpFormat::from_name(&c.format)?;
        let scheme = parse_scheme(&c.scheme, &format)?;
        c.format = format.name();
        c.scheme = scheme_name(&scheme);
        Storage::quantized(format, scheme)
    };
    let stream = GradientStreamSpec::gaussian(c.mu, c.sigma, c.dimension, c.seed);
    let cfg = CurveConfig {
        stream,
        ema: EmaConfig::new(c.beta, storage, rounding),
        steps: c.steps,
        trials: c.trials,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn problem_spec(name: &str, dimension: usize, noise: f64) -> ProblemSpec {
    let spec = ProblemSpec {
        name: name.to_string(),
        params: Map::new(),
    }
    .with_param("dimension", dimension as u64);
    if name == "noisy_quadratic" {
        spec.with_param("noise", noise)
    } else {
        spec
    }
}

fn train_config(steps: u64, lr: f64, beta2: f64) -> TrainConfig {
    TrainConfig {
        steps,
        hyper: AdamHyper {
            lr,
            beta2,
            ..TrainConfig::default().hyper
        },
        ..TrainConfig::default()
    }
}

fn skip_config(c: &SkipStudy) -> Result<SkipStudyConfig> {
    let targets = c
        .target
        .iter()
        .map(|t| match t.as_str() {
            "first" | "m" => Ok(Moment::First),
            "second" | "v" => Ok(Moment::Second),
            other => Err(Error::Usage(format!(
                "unknown skip target `{other}` (first, second)"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SkipStudyConfig {
        problem: problem_spec(&c.problem, c.dimension, c.noise),
        train: train_config(c.steps, c.lr, 0.999),
        p_skips: c.p_skip.clone(),
        targets,
        seeds: c.seeds.0.clone(),
    })
}

/// Expands `kstar` into a concrete `periodic:<K>` and builds the arm grid.
/// `kstar` uses the theory period of the first quantized precision listed
/// (fp4 when none is), so a full-precision control gets the same schedule.
fn reset_config(c: &mut ResetStudy) -> Result<ResetStudyConfig> {
    if c.format.is_empty() || c.rounding.is_empty() || c.policy.is_empty() {
        return Err(Error::Usage(
            "reset study needs formats, roundings and policies".into(),
        ));
    }
    let precisions = c
        .format
        .iter()
        .map(|p| StatePrecision::preset(p).map(|s| (p.clone(), s)))
        .collect::<Result<Vec<_>>>()?;
    let roundings = c
        .rounding
        .iter()
        .map(|r| parse_rounding(r))
        .collect::<Result<Vec<_>>>()?;
    c.rounding = roundings.iter().map(|r| r.as_str().to_string()).collect();
    if c.policy.iter().any(|p| p == "kstar") {
        let source = precisions
            .iter()
            .find(|(_, s)| !s.is_full())
            .map_or("fp4", |(name, _)| name.as_str());
        let k = kstar_policy(source, c.beta2, c.s0)?.u64_param("period")?;
        for p in c.policy.iter_mut().filter(|p| *p == "kstar") {
            *p = format!("periodic:{k}");
        }
    }

    let mut arms = Vec::new();
    for (name, precision) in &precisions {
        for (i, &rounding) in roundings.iter().enumerate() {
            if precision.is_full() && i > 0 {
                break;
            }
            for p in &c.policy {
                let Some(policy) = policy_for(p, precision, rounding, c)? else {
                    continue;
                };
                arms.push(ArmSpec {
                    precision: name.clone(),
                    rounding,
                    policy,
                });
            }
        }
    }
    Ok(ResetStudyConfig {
        problem: problem_spec(&c.problem, c.dimension, c.noise),
        train: train_config(c.steps, c.lr, c.beta2),
        arms,
        seeds: c.seeds.0.clone(),
    })
}

/// `None` for combinations that do not apply (adaptive resets on exact storage).
fn policy_for(
    spec: &str,
    precision: &StatePrecision,
    rounding: RoundingMode,
    c: &ResetStudy,
) -> Result<Option<ResetPolicy>> {
    Ok(Some(match spec.split_once(':') {
        None if spec == "none" => ResetPolicy::none(),
        None if spec == "adaptive" => match precision.v {
            Storage::Full => return Ok(None),
            Storage::Quantized { format, .. } => {
                let rho = rhohat(format.epsilon(), c.beta2)?;
                let p_ss = match rounding {
                    RoundingMode::Nearest => p_stall_nr_ss(rho),
                    RoundingMode::Stochastic => p_stall_sr_ss(rho),
                };
                ResetPolicy::adaptive(c.s0, p_ss, c.beta2)
            }
        },
        Some(("periodic", k)) => ResetPolicy::periodic(
            k.parse()
                .ok()
                .filter(|&k: &u64| k > 0)
                .ok_or_else(|| Error::Usage(format!("bad period in `{spec}`")))?,
        ),
        _ => {
            return Err(Error::Usage(format!(
                "unknown policy `{spec}` (none, kstar, periodic:<K>, adaptive)"
            )))
        }
    }))
}

fn reset_summary(c: &ResetStudy, result: &ExperimentResult) -> Result<String> {
    let arms = result.arm_summaries()?;
    let mut parts = vec![format!("reset-study seeds={:?}:", c.seeds.0)];
    for (k, v) in result
        .summary
        .iter()
        .filter(|(k, _)| k.starts_with("winner["))
    {
        parts.push(format!("{k}={}", v.as_str().unwrap_or_default()));
    }
    // periodic versus no reset within each precision/rounding group
    for a in arms.iter().filter(|a| a.arm.policy.name == "none") {
        for b in arms.iter().filter(|b| {
            b.arm.policy.name == "periodic"
                && b.arm.precision == a.arm.precision
                && b.arm.rounding == a.arm.rounding
        }) {
            let verdict = if b.median < a.median {
                "beats"
            } else {
                "does not beat"
            };
            parts.push(format!(
                "{}/{}: {} {verdict} none ({:.4} vs {:.4})",
                a.arm.precision,
                a.arm.rounding,
                b.arm.policy.label(),
                b.median,
                a.median
            ));
        }
    }
    Ok(parts.join(" "))
}
