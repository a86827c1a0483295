//! Toy training problems, selected by name at runtime.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// A differentiable objective with a stochastic gradient oracle.
pub trait ToyProblem: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn init(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Exact objective, used for evaluation.
    fn loss(&self, x: &[f64]) -> f64;

    /// Writes a stochastic gradient at `x` into `out`.
    fn gradient(&self, x: &[f64], rng: &mut dyn rand::RngCore, out: &mut [f64]);

    /// Optimal loss when known in closed form.
    fn optimum(&self) -> Option<f64> {
        None
    }
}

/// `0.5 sum h_i (x_i - x*_i)^2` with gradient noise `noise * sqrt(h_i) * z`.
#[derive(Debug, Clone)]
pub struct NoisyQuadratic {
    pub h: Vec<f64>,
    pub x_star: Vec<f64>,
    pub noise: f64,
}

impl NoisyQuadratic {
    /// Curvatures log-uniform in `[h_min, h_max]`, optimum standard normal.
    pub fn sample<R: Rng + ?Sized>(
        dim: usize,
        h_min: f64,
        h_max: f64,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || !(h_min > 0.0 && h_min <= h_max && h_max.is_finite()) || !(noise >= 0.0) {
            return Err(Error::usage(
                "noisy_quadratic needs dim >= 1, 0 < h_min <= h_max, noise >= 0",
            ));
        }
        let (lo, hi) = (h_min.ln(), h_max.ln());
        let h = (0..dim)
            .map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp())
            .collect();
        let x_star = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        Ok(NoisyQuadratic { h, x_star, noise })
    }
}

impl ToyProblem for NoisyQuadratic {
    fn name(&self) -> &'static str {
        "noisy_quadratic"
    }

    fn dim(&self) -> usize {
        self.h.len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        0.5 * x
            .iter()
            .zip(&self.h)
            .zip(&self.x_star)
            .map(|((x, h), s)| h * (x - s) * (x - s))
            .sum::<f64>()
    }

    fn gradient(&self, x: &[f64], rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        for (((g, x), h), s) in out.iter_mut().zip(x).zip(&self.h).zip(&self.x_star) {
            let z: f64 = StandardNormal.sample(rng);
            *g = h * (x - s) + self.noise * h.sqrt() * z;
        }
    }

    fn optimum(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Mean logistic loss on a fixed synthetic data set, minibatch gradients.
#[derive(Debug, Clone)]
pub struct SynthLogistic {
    /// Row-major `n x d` features.
    pub features: Vec<f64>,
    /// Labels in `{-1, +1}`.
    pub labels: Vec<f64>,
    pub dim: usize,
    pub batch: usize,
}

impl SynthLogistic {
    /// Gaussian features, labels from a random teacher with a fraction
    /// `label_noise` flipped.
    pub fn sample<R: Rng + ?Sized>(
        n: usize,
        dim: usize,
        label_noise: f64,
        batch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 || dim == 0 || batch == 0 || !(0.0..=0.5).contains(&label_noise) {
            return Err(Error::usage(
                "synth_logistic needs n, dim, batch >= 1 and label_noise in [0, 0.5]",
            ));
        }
        let teacher: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let features: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
        let labels = features
            .chunks(dim)
            .map(|row| {
                let y = if dot(row, &teacher) >= 0.0 { 1.0 } else { -1.0 };
                if rng.random::<f64>() < label_noise {
                    -y
                } else {
                    y
                }
            })
            .collect();
        Ok(SynthLogistic {
            features,
            labels,
            dim,
            batch: batch.min(n),
        })
    }

    fn n(&self) -> usize {
        self.labels.len()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// `ln(1 + e^-t)` without overflow.
fn softplus_neg(t: f64) -> f64 {
    if t > 0.0 {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

impl ToyProblem for SynthLogistic {
    fn name(&self) -> &'static str {
        "synth_logistic"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let total: f64 = self
            .features
            .chunks(self.dim)
            .zip(&self.labels)
            .map(|(row, y)| softplus_neg(y * dot(row, x)))
            .sum();
        total / self.n() as f64
    }

    fn gradient(&self, x: &[f64], rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        out.fill(0.0);
        for _ in 0..self.batch {
            let i = rng.random_range(0..self.n());
            let row = &self.features[i * self.dim..(i + 1) * self.dim];
            let y = self.labels[i];
            // d/dx ln(1 + e^{-y w.x}) = -y sigmoid(-y w.x) x
            let coef = -y / (1.0 + (y * dot(row, x)).exp());
            for (g, r) in out.iter_mut().zip(row) {
                *g += coef * r;
            }
        }
        let inv = 1.0 / self.batch as f64;
        out.iter_mut().for_each(|g| *g *= inv);
    }
}

/// Serializable problem description: registry name plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl ProblemSpec {
    pub fn noisy_quadratic() -> Self {
        ProblemSpec {
            name: "noisy_quadratic".into(),
            params: Map::new(),
        }
    }

    pub fn synth_logistic() -> Self {
        ProblemSpec {
            name: "synth_logistic".into(),
            params: Map::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::usage(format!("problem parameter `{key}` must be a number"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().map(|v| v as usize).ok_or_else(|| {
                Error::usage(format!(
                    "problem parameter `{key}` must be a non-negative integer"
                ))
            }),
        }
    }
}

pub type ProblemFactory = fn(&ProblemSpec, &mut dyn rand::RngCore) -> Result<Box<dyn ToyProblem>>;

/// Name-to-factory table of toy problems.
#[derive(Clone)]
pub struct ProblemRegistry {
    factories: BTreeMap<String, ProblemFactory>,
}

impl fmt::Debug for ProblemRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for ProblemRegistry {
    fn default() -> Self {
        let mut r = ProblemRegistry::empty();
        r.register("noisy_quadratic", |p, rng| {
            Ok(Box::new(NoisyQuadratic::sample(
                p.usize_or("dimension", 256)?,
                p.f64_or("h_min", 1e-3)?,
                p.f64_or("h_max", 1.0)?,
                p.f64_or("noise", 0.5)?,
                rng,
            )?))
        });
        r.register("synth_logistic", |p, rng| {
            Ok(Box::new(SynthLogistic::sample(
                p.usize_or("samples", 1024)?,
                p.usize_or("dimension", 32)?,
                p.f64_or("label_noise", 0.1)?,
                p.usize_or("batch", 32)?,
                rng,
            )?))
        });
        r
    }
}

impl ProblemRegistry {
    pub fn empty() -> Self {
        ProblemRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: ProblemFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Builds a problem instance, drawing its random data from `rng`.
    pub fn build(
        &self,
        spec: &ProblemSpec,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Box<dyn ToyProblem>> {
        let factory = self
            .factories
            .get(&spec.name)
            .ok_or_else(|| Error::Unknown {
                kind: "problem",
                name: spec.name.clone(),
            })?;
        factory(spec, rng)
    }
}
