//! Safety enforcement, kept separate from learning.
//!
//! [`project_action`] maps any proposed action onto the nearest safe action in
//! embedding space before execution. [`renormalize_policy_safe`] restricts a
//! policy to the safe set for use inside value backups.

use crate::mdp::SafetySpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Safe-mass threshold below which renormalization falls back to uniform.
pub const STARVATION_EPS: f64 = 1e-12;

/// Outcome of projecting one proposed action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub exec_action: usize,
    pub was_modified: bool,
    /// Squared embedding distance between proposed and executed action.
    pub distance: f64,
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Nearest safe action to `a_raw` under squared embedding distance.
/// Ties go to the lowest action id.
pub fn project_action(spec: &SafetySpec, s: usize, a_raw: usize) -> ProjectionResult {
    if spec.is_safe(s, a_raw) {
        return ProjectionResult {
            exec_action: a_raw,
            was_modified: false,
            distance: 0.0,
        };
    }
    let raw = spec.embedding(a_raw);
    let mut best = (usize::MAX, f64::INFINITY);
    for &a in spec.safe_actions(s) {
        let d = squared_distance(raw, spec.embedding(a));
        // strict comparison over ascending ids keeps the lowest id on ties
        if d < best.1 {
            best = (a, d);
        }
    }
    ProjectionResult {
        exec_action: best.0,
        was_modified: true,
        distance: best.1,
    }
}

/// A probability vector over actions for a single state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyDistribution(Vec<f64>);

impl PolicyDistribution {
    /// Validates non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution(format!("invalid entries in {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Distribution(format!("mass {sum} != 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Uniform over `support`, zero elsewhere.
    pub fn uniform_over(n: usize, support: &[usize]) -> Self {
        let mut p = vec![0.0; n];
        let w = 1.0 / support.len() as f64;
        for &a in support {
            p[a] = w;
        }
        Self(p)
    }

    pub fn one_hot(n: usize, a: usize) -> Self {
        let mut p = vec![0.0; n];
        p[a] = 1.0;
        Self(p)
    }

    /// Numerically stable softmax of `logits`.
    pub fn softmax(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability action, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (a, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = a;
            }
        }
        best
    }

    /// Inverse-CDF sample from a uniform draw `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (a, p) in self.0.iter().enumerate() {
            if *p > 0.0 {
                last_positive = a;
            }
            acc += p;
            if u < acc {
                return a;
            }
        }
        last_positive
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Result of [`renormalize_policy_safe`]. `starved` marks the uniform fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeRenormalization {
    pub dist: PolicyDistribution,
    pub starved: bool,
}

/// `pi_safe(a) = pi(a) * 1[a safe] / sum_{a'' safe} pi(a'')`.
///
/// When the safe mass is below [`STARVATION_EPS`] the result is uniform over
/// the safe set and `starved` is set.
pub fn renormalize_policy_safe(
    dist: &PolicyDistribution,
    s: usize,
    spec: &SafetySpec,
) -> SafeRenormalization {
    let n = dist.len();
    let safe = spec.safe_actions(s);
    let mass: f64 = safe.iter().map(|&a| dist.0[a]).sum();
    if mass < STARVATION_EPS {
        return SafeRenormalization {
            dist: PolicyDistribution::uniform_over(n, safe),
            starved: true,
        };
    }
    let mut out = vec![0.0; n];
    for &a in safe {
        out[a] = dist.0[a] / mass;
    }
    SafeRenormalization {
        dist: PolicyDistribution(out),
        starved: false,
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn safe_entropy(dist: &PolicyDistribution) -> f64 {
    entropy(dist.probs())
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}
