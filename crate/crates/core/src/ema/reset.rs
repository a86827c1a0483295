//! Reset strategies, selected by name at runtime.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::theory::remaining_error_e;

/// Decides after each step whether a state tensor should be reset.
pub trait ResetStrategy: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// `k` is the cycle clock after the step, `stalled_fraction` the fraction
    /// of entries whose stored state did not change on this step.
    fn should_reset(&mut self, k: u64, stalled_fraction: f64) -> bool;

    fn on_reset(&mut self) {}

    fn clone_box(&self) -> Box<dyn ResetStrategy>;
}

impl Clone for Box<dyn ResetStrategy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Debug, Clone, Default)]
pub struct NoReset;

impl ResetStrategy for NoReset {
    fn name(&self) -> &'static str {
        "none"
    }

    fn should_reset(&mut self, _k: u64, _stalled_fraction: f64) -> bool {
        false
    }

    fn clone_box(&self) -> Box<dyn ResetStrategy> {
        Box::new(self.clone())
    }
}

/// Resets every `period` steps.
#[derive(Debug, Clone)]
pub struct Periodic {
    pub period: u64,
}

impl ResetStrategy for Periodic {
    fn name(&self) -> &'static str {
        "periodic"
    }

    fn should_reset(&mut self, k: u64, _stalled_fraction: f64) -> bool {
        k >= self.period
    }

    fn clone_box(&self) -> Box<dyn ResetStrategy> {
        Box::new(self.clone())
    }
}

/// Accumulates excess staleness and resets once its cycle average reaches the
/// remaining statistical error of the bias-corrected EMA.
#[derive(Debug, Clone)]
pub struct Adaptive {
    pub s0: f64,
    pub p_ss: f64,
    pub beta2: f64,
    acc: f64,
}

impl Adaptive {
    pub fn new(s0: f64, p_ss: f64, beta2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&s0) {
            return Err(Error::usage(format!("s0 must lie in [0, 1), got {s0}")));
        }
        if !(p_ss > 0.0 && p_ss <= 1.0) {
            return Err(Error::usage(format!("p_ss must lie in (0, 1], got {p_ss}")));
        }
        if !(beta2 > 0.0 && beta2 < 1.0) {
            return Err(Error::usage(format!(
                "beta2 must lie in (0, 1), got {beta2}"
            )));
        }
        Ok(Adaptive {
            s0,
            p_ss,
            beta2,
            acc: 0.0,
        })
    }

    /// Accumulated excess staleness in the current cycle.
    pub fn accumulated(&self) -> f64 {
        self.acc
    }
}

impl ResetStrategy for Adaptive {
    fn name(&self) -> &'static str {
        "adaptive"
    }

    fn should_reset(&mut self, k: u64, stalled_fraction: f64) -> bool {
        let s = stalled_fraction / self.p_ss;
        self.acc += ((s - self.s0) / (1.0 - self.s0)).max(0.0);
        k > 0 && self.acc / k as f64 >= remaining_error_e(k, self.beta2)
    }

    fn on_reset(&mut self) {
        self.acc = 0.0;
    }

    fn clone_box(&self) -> Box<dyn ResetStrategy> {
        Box::new(self.clone())
    }
}

/// Which Adam moments a policy governs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentTarget {
    First,
    Second,
    #[default]
    Both,
}

impl MomentTarget {
    pub fn first(&self) -> bool {
        matches!(self, MomentTarget::First | MomentTarget::Both)
    }

    pub fn second(&self) -> bool {
        matches!(self, MomentTarget::Second | MomentTarget::Both)
    }
}

/// Serializable description of a reset strategy: a registry name plus its
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetPolicy {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub applies_to: MomentTarget,
}

impl ResetPolicy {
    pub fn none() -> Self {
        ResetPolicy {
            name: "none".into(),
            params: Map::new(),
            applies_to: MomentTarget::Both,
        }
    }

    pub fn periodic(period: u64) -> Self {
        let mut params = Map::new();
        params.insert("period".into(), period.into());
        ResetPolicy {
            name: "periodic".into(),
            params,
            applies_to: MomentTarget::Both,
        }
    }

    pub fn adaptive(s0: f64, p_ss: f64, beta2: f64) -> Self {
        let mut params = Map::new();
        params.insert("s0".into(), s0.into());
        params.insert("p_ss".into(), p_ss.into());
        params.insert("beta2".into(), beta2.into());
        ResetPolicy {
            name: "adaptive".into(),
            params,
            applies_to: MomentTarget::Both,
        }
    }

    pub fn applied_to(mut self, target: MomentTarget) -> Self {
        self.applies_to = target;
        self
    }

    /// Short label such as `periodic(K=224)`.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.name.clone();
        }
        let args: Vec<String> = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let target = match self.applies_to {
            MomentTarget::Both => String::new(),
            MomentTarget::First => "@m".into(),
            MomentTarget::Second => "@v".into(),
        };
        format!("{}({}){target}", self.name, args.join(","))
    }

    pub fn f64_param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::usage(format!("policy `{}` needs numeric `{key}`", self.name)))
    }

    pub fn u64_param(&self, key: &str) -> Result<u64> {
        self.params
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::usage(format!("policy `{}` needs integer `{key}`", self.name)))
    }
}

pub type ResetFactory = fn(&ResetPolicy) -> Result<Box<dyn ResetStrategy>>;

/// Name-to-factory table of reset strategies.
#[derive(Clone)]
pub struct ResetRegistry {
    factories: BTreeMap<String, ResetFactory>,
}

impl fmt::Debug for ResetRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for ResetRegistry {
    fn default() -> Self {
        let mut r = ResetRegistry::empty();
        r.register("none", |_| Ok(Box::new(NoReset)));
        r.register("periodic", |p| {
            let period = p.u64_param("period")?;
            if period == 0 {
                return Err(Error::usage("period must be at least 1"));
            }
            Ok(Box::new(Periodic { period }))
        });
        r.register("adaptive", |p| {
            Ok(Box::new(Adaptive::new(
                p.f64_param("s0")?,
                p.f64_param("p_ss")?,
                p.f64_param("beta2")?,
            )?))
        });
        r
    }
}

impl ResetRegistry {
    pub fn empty() -> Self {
        ResetRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: ResetFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, policy: &ResetPolicy) -> Result<Box<dyn ResetStrategy>> {
        let factory = self
            .factories
            .get(&policy.name)
            .ok_or_else(|| Error::Unknown {
                kind: "reset policy",
                name: policy.name.clone(),
            })?;
        factory(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_fires_on_period() {
        let mut p = Periodic { period: 5 };
        let fired: Vec<bool> = (1..=4).map(|k| p.should_reset(k, 0.0)).collect();
        assert_eq!(fired, vec![false; 4]);
        assert!(p.should_reset(5, 0.0));
    }

    #[test]
    fn adaptive_never_fires_without_stalls() {
        let mut a = Adaptive::new(0.6, 0.9, 0.999).unwrap();
        assert!((1..=100_000).all(|k| !a.should_reset(k, 0.0)));
    }

    #[test]
    fn adaptive_fires_at_first_satisfied_inequality() {
        for (s0, p_ss, frac) in [(0.6, 1.0, 1.0), (0.6, 0.95, 0.7), (0.3, 0.99, 0.5)] {
            let mut a = Adaptive::new(s0, p_ss, 0.999).unwrap();
            let per_step = ((frac / p_ss - s0) / (1.0 - s0)).max(0.0);
            let expected = (1u64..100_000)
                .find(|&k| {
                    per_step >= 2.0 * 0.999f64.powi(k as i32) / (1.0 + 0.999f64.powi(k as i32))
                })
                .unwrap();
            let got = (1u64..100_000).find(|&k| a.should_reset(k, frac)).unwrap();
            assert_eq!(got, expected, "s0 {s0} p_ss {p_ss} frac {frac}");
        }
    }

    #[test]
    fn registry_builds_by_name() {
        let r = ResetRegistry::default();
        assert_eq!(
            r.names().collect::<Vec<_>>(),
            vec!["adaptive", "none", "periodic"]
        );
        assert_eq!(
            r.build(&ResetPolicy::periodic(7)).unwrap().name(),
            "periodic"
        );
        assert_eq!(
            r.build(&ResetPolicy::adaptive(0.6, 0.9, 0.999))
                .unwrap()
                .name(),
            "adaptive"
        );
        assert!(r.build(&ResetPolicy::periodic(0)).is_err());
        let bogus = ResetPolicy {
            name: "cosine".into(),
            ..ResetPolicy::none()
        };
        assert!(matches!(r.build(&bogus), Err(Error::Unknown { .. })));
        assert!(r.build(&ResetPolicy::adaptive(1.2, 0.9, 0.999)).is_err());
    }

    #[test]
    fn policy_json_round_trip() {
        let p = ResetPolicy::periodic(224).applied_to(MomentTarget::Second);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(
            text,
            r#"{"name":"periodic","params":{"period":224},"applies_to":"second"}"#
        );
        assert_eq!(serde_json::from_str::<ResetPolicy>(&text).unwrap(), p);
        let minimal: ResetPolicy = serde_json::from_str(r#"{"name":"none"}"#).unwrap();
        assert_eq!(minimal, ResetPolicy::none());
        assert_eq!(p.label(), "periodic(period=224)@v");
    }
}
