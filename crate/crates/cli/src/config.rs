//! Resolved command configurations. Each command starts from a preset,
//! applies explicit flags, then applies keys from a `--config` JSON file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use qema::{Error, Result};

/// Seed list given as `0,1,2` or a half-open range `0..15`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a
            .trim()
            .parse()
            .map_err(|_| format!("bad range start in `{s}`"))?;
        let b: u64 = b
            .trim()
            .parse()
            .map_err(|_| format!("bad range end in `{s}`"))?;
        if b <= a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad seed `{p}`"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Seeds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced sizes for smoke tests and CI.
    Quick,
    /// Sizes used for the reference results.
    #[default]
    Full,
}

/// Reads a JSON object from `path`.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(Error::Usage(format!("{}: {e}", path.display()))),
    }
}

/// Overlays `flags` (only the keys that were given) and then `file` onto
/// `base`. Keys unknown to `base` are rejected.
pub fn resolve<T: Serialize + DeserializeOwned>(
    base: &T,
    flags: &impl Serialize,
    file: Option<&Map<String, Value>>,
) -> Result<T> {
    let to_obj = |v: Value| match v {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let mut merged = to_obj(serde_json::to_value(base).map_err(|e| Error::Usage(e.to_string()))?);
    let given = to_obj(serde_json::to_value(flags).map_err(|e| Error::Usage(e.to_string()))?);
    for (source, layer) in [("flag", Some(&given)), ("config file", file)] {
        let Some(layer) = layer else { continue };
        for (k, v) in layer {
            if !merged.contains_key(k) {
                let mut known: Vec<&str> = merged.keys().map(String::as_str).collect();
                known.sort_unstable();
                return Err(Error::Usage(format!(
                    "unknown {source} key `{k}` for this command (known: {})",
                    known.join(", ")
                )));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Usage(format!("invalid configuration: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictStall {
    pub format: Vec<String>,
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictWindow {
    pub format: Vec<String>,
    pub beta2: f64,
    pub p0: Vec<f64>,
    /// One per format; empty selects each format's default floor.
    pub p_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictPeriod {
    pub format: Vec<String>,
    pub beta2: f64,
    pub s0: Vec<f64>,
}

pub const DEFAULT_FORMATS: [&str; 3] = ["bf16", "fp8_e4m3", "fp4_e2m2u"];

fn default_formats() -> Vec<String> {
    DEFAULT_FORMATS.iter().map(|s| s.to_string()).collect()
}

impl Default for PredictStall {
    fn default() -> Self {
        PredictStall {
            format: default_formats(),
            beta2: 0.999,
        }
    }
}

impl Default for PredictWindow {
    fn default() -> Self {
        PredictWindow {
            format: default_formats(),
            beta2: 0.999,
            p0: vec![0.5, 0.8, 0.9, 0.95],
            p_init: Vec::new(),
        }
    }
}

impl Default for PredictPeriod {
    fn default() -> Self {
        PredictPeriod {
            format: default_formats(),
            beta2: 0.999,
            s0: vec![0.6],
        }
    }
}

/// A single EMA tensor fed by a Gaussian stream; used by `stall-curve`
/// (second moment) and `first-moment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Curve {
    pub format: String,
    /// `auto`, `unscaled`, `per-tensor`, `block:<n>` or `fixed:<scale>`.
    pub scheme: String,
    pub rounding: String,
    /// EMA decay (`beta2` for the second moment, `beta1` for the first).
    pub beta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dimension: usize,
    pub steps: u64,
    pub trials: u32,
    pub seed: u64,
}

impl Curve {
    pub fn stall_preset(p: Preset) -> Self {
        let (dimension, steps) = match p {
            Preset::Quick => (1024, 1000),
            Preset::Full => (10240, 5000),
        };
        Curve {
            format: "bf16".into(),
            scheme: "auto".into(),
            rounding: "nr".into(),
            beta: 0.999,
            mu: 0.0,
            sigma: 1.0,
            dimension,
            steps,
            trials: 1,
            seed: 0,
        }
    }

    pub fn first_moment_preset(p: Preset) -> Self {
        Curve {
            format: "fp4_e2m1".into(),
            beta: 0.9,
            mu: 0.5,
            ..Curve::stall_preset(p)
        }
    }
}

/// Toy-problem settings shared by the training studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipStudy {
    pub problem: String,
    pub dimension: usize,
    pub noise: f64,
    pub steps: u64,
    pub lr: f64,
    pub seeds: Seeds,
    pub p_skip: Vec<f64>,
    /// `first` and/or `second`.
    pub target: Vec<String>,
}

impl SkipStudy {
    pub fn preset(p: Preset) -> Self {
        let (dimension, steps, seeds) = match p {
            Preset::Quick => (64, 300, 3),
            Preset::Full => (256, 3000, 5),
        };
        SkipStudy {
            problem: "noisy_quadratic".into(),
            dimension,
            noise: 0.5,
            steps,
            lr: 0.01,
            seeds: Seeds((0..seeds).collect()),
            p_skip: vec![0.0, 0.5, 0.9, 0.99],
            target: vec!["first".into(), "second".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetStudy {
    pub problem: String,
    pub dimension: usize,
    pub noise: f64,
    pub steps: u64,
    pub lr: f64,
    pub beta2: f64,
    pub s0: f64,
    pub seeds: Seeds,
    /// State precision presets: `full`, `bf16`, `fp8`, `fp4`.
    pub format: Vec<String>,
    pub rounding: Vec<String>,
    /// `none`, `kstar`, `periodic:<K>` or `adaptive`.
    pub policy: Vec<String>,
}

impl ResetStudy {
    pub fn preset(p: Preset) -> Self {
        let (dimension, steps, seeds) = match p {
            Preset::Quick => (64, 600, 3),
            Preset::Full => (256, 3000, 15),
        };
        ResetStudy {
            problem: "noisy_quadratic".into(),
            dimension,
            noise: 0.5,
            steps,
            lr: 0.01,
            beta2: 0.999,
            s0: 0.6,
            seeds: Seeds((0..seeds).collect()),
            format: vec!["full".into(), "fp4".into()],
            rounding: vec!["nr".into(), "sr".into()],
            policy: vec!["none".into(), "kstar".into()],
        }
    }
}
