//! Seeded experiment drivers: synthetic gradient streams, stall-curve
//! measurement against the closed-form predictors, and toy-problem training
//! studies for forced skips and state resets.
//!
//! Every experiment is a pure function of its config. Trials and seeds run
//! in parallel on independent ChaCha substreams and are aggregated in a
//! fixed order, so a parallel run equals a sequential one bit for bit.

mod curves;
mod problems;
mod stream;
mod studies;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ema::StallTrace;
use crate::error::{Error, Result};

pub use curves::{monotone_rise, run_first_moment_curve, run_stall_curve, CurveConfig};
pub use problems::{
    NoisyQuadratic, ProblemFactory, ProblemRegistry, ProblemSpec, SynthLogistic, ToyProblem,
};
pub use stream::{GradientStreamSpec, Segment, StreamKind};
pub use studies::{
    kstar_policy, run_reset_study, run_skip_study, ArmSpec, ArmSummary, ResetStudyConfig,
    SkipStudyConfig,
};
pub use train::{train_run, RunSpec, StatePrecision, TrainConfig, TrainOutcome};

/// Bumped whenever the JSON or CSV layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// `(step, loss)` samples of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub seed: u64,
    pub points: Vec<(u64, f64)>,
}

/// Output of one experiment. `columns`/`rows` form the CSV table; the JSON
/// document holds everything except the wall time, so reruns are
/// byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub experiment: String,
    pub config: Value,
    pub summary: BTreeMap<String, Value>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    #[serde(default)]
    pub traces: Vec<StallTrace>,
    #[serde(default)]
    pub loss_curves: Vec<LossCurve>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl ExperimentResult {
    fn new<C: Serialize>(experiment: &str, config: &C, columns: &[&str]) -> Result<Self> {
        Ok(ExperimentResult {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.to_string(),
            config: serde_json::to_value(config).map_err(|e| Error::io("config snapshot", e))?,
            summary: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            traces: Vec::new(),
            loss_curves: Vec::new(),
            wall_time_s: 0.0,
        })
    }

    /// Numeric summary entry.
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.summary.get(key).and_then(Value::as_f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::io("result json", e))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::io("csv write", e);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text)).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("csv flush", e))?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        let file = fs::File::create(&csv_path)
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        fs::write(&json_path, self.to_json())
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        Ok((csv_path, json_path))
    }
}

/// JSON number for finite values, a `"inf"`/`"-inf"`/`"nan"` marker otherwise.
pub(crate) fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Bool(b) => u8::from(*b).to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Substream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Linear-interpolation quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

/// Interquartile range.
pub fn iqr(data: &[f64]) -> f64 {
    quantile(data, 0.75) - quantile(data, 0.25)
}
