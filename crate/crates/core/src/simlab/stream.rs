use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stretch of a piecewise noise schedule, active up to and including `until_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub until_step: u64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamKind {
    GaussianIid {
        #[serde(default)]
        mu: f64,
        sigma: f64,
    },
    /// Gaussian with a step-dependent scale. The last segment extends forever.
    Piecewise {
        #[serde(default)]
        mu: f64,
        segments: Vec<Segment>,
    },
}

/// Synthetic gradients `g = mu + sigma(t) z` with `z` standard normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStreamSpec {
    pub kind: StreamKind,
    pub dimension: usize,
    pub seed: u64,
}

impl GradientStreamSpec {
    pub fn gaussian(mu: f64, sigma: f64, dimension: usize, seed: u64) -> Self {
        GradientStreamSpec {
            kind: StreamKind::GaussianIid { mu, sigma },
            dimension,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::usage("stream dimension must be at least 1"));
        }
        let bad_sigma = |s: f64| !(s > 0.0 && s.is_finite());
        match &self.kind {
            StreamKind::GaussianIid { mu, sigma } => {
                if bad_sigma(*sigma) || !mu.is_finite() {
                    return Err(Error::usage(format!(
                        "need finite mu and sigma > 0, got mu {mu} sigma {sigma}"
                    )));
                }
            }
            StreamKind::Piecewise { mu, segments } => {
                if segments.is_empty() || !mu.is_finite() {
                    return Err(Error::usage(
                        "piecewise stream needs a finite mu and at least one segment",
                    ));
                }
                if segments.iter().any(|s| bad_sigma(s.sigma)) {
                    return Err(Error::usage("every segment sigma must be > 0"));
                }
                if segments
                    .windows(2)
                    .any(|w| w[1].until_step <= w[0].until_step)
                {
                    return Err(Error::usage("segment end steps must increase"));
                }
            }
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        match &self.kind {
            StreamKind::GaussianIid { mu, .. } | StreamKind::Piecewise { mu, .. } => *mu,
        }
    }

    /// Noise scale at 1-based `step`.
    pub fn sigma_at(&self, step: u64) -> f64 {
        match &self.kind {
            StreamKind::GaussianIid { sigma, .. } => *sigma,
            StreamKind::Piecewise { segments, .. } => segments
                .iter()
                .find(|s| step <= s.until_step)
                .or(segments.last())
                .map_or(1.0, |s| s.sigma),
        }
    }

    /// Fills `out` with the gradient for `step`.
    pub fn sample_into<R: Rng + ?Sized>(&self, step: u64, rng: &mut R, out: &mut [f64]) {
        let (mu, sigma) = (self.mu(), self.sigma_at(step));
        for g in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *g = mu + sigma * z;
        }
    }

    /// The same stream with `mu` and every `sigma` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let kind = match &self.kind {
            StreamKind::GaussianIid { mu, sigma } => StreamKind::GaussianIid {
                mu: mu * c,
                sigma: sigma * c,
            },
            StreamKind::Piecewise { mu, segments } => StreamKind::Piecewise {
                mu: mu * c,
                segments: segments
                    .iter()
                    .map(|s| Segment {
                        until_step: s.until_step,
                        sigma: s.sigma * c,
                    })
                    .collect(),
            },
        };
        GradientStreamSpec {
            kind,
            ..self.clone()
        }
    }
}
