//! Evaluation metrics: TD error, coverage, visitation entropy, departure from
//! the behavior-cloning policy, shadow-channel rates and margin scanning.

use crate::guardian::{entropy, project_action, PolicyDistribution};
use crate::learner::{compute_guarded_target, pessimistic_q, LearnerConfig, PolicyTable, QEnsemble};
use crate::mdp::{solve_guarded_value_iteration, QTable, SafetySpec, TabularMdp};
use crate::sampling::TransitionRecord;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

/// Default probability threshold for the action novelty rate.
pub const DEFAULT_NOVELTY_EPS: f64 = 0.05;
/// Default near-miss margin for unit grid embeddings.
pub const DEFAULT_NEAR_MISS_MARGIN: f64 = 1.5;
/// Tolerance for "not reward-dominated" in [`margin_scan`].
pub const MARGIN_SCAN_TOL_Q: f64 = 1e-6;

/// Mean `|Q_min(s, a) - y|` over the batch, with `y` from the configured backup.
pub fn td_error_stats(
    batch: &[TransitionRecord],
    ens: &QEnsemble,
    pol: &PolicyTable,
    spec: &SafetySpec,
    cfg: &LearnerConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Metric("TD error of an empty batch".into()));
    }
    let total: f64 = batch
        .iter()
        .map(|tr| {
            let y = compute_guarded_target(tr, pol, ens, spec, cfg).value;
            (pessimistic_q(ens, tr.s, tr.a_exec, false) - y).abs()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Visit counters plus a set of hashed state keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitationStats {
    num_actions: usize,
    state_counts: Vec<u64>,
    pair_counts: Vec<u64>,
    hashed: BTreeSet<u64>,
}

fn state_key<T: Hash>(state: &T) -> u64 {
    let mut h = DefaultHasher::new();
    state.hash(&mut h);
    h.finish()
}

impl VisitationStats {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            state_counts: vec![0; num_states],
            pair_counts: vec![0; num_states * num_actions],
            hashed: BTreeSet::new(),
        }
    }

    /// Records a visit to `s` where `a` was executed.
    pub fn record(&mut self, s: usize, a: usize) {
        self.state_counts[s] += 1;
        self.pair_counts[s * self.num_actions + a] += 1;
        self.hashed.insert(state_key(&s));
    }

    pub fn state_counts(&self) -> &[u64] {
        &self.state_counts
    }

    pub fn pair_count(&self, s: usize, a: usize) -> u64 {
        self.pair_counts[s * self.num_actions + a]
    }

    pub fn total(&self) -> u64 {
        self.state_counts.iter().sum()
    }

    /// Visit distribution over states; errors when nothing was visited.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Metric("no visits recorded".into()));
        }
        Ok(self.state_counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

pub fn coverage_count(stats: &VisitationStats) -> usize {
    stats.hashed.len()
}

/// Shannon entropy (nats) of the empirical state-visit distribution.
pub fn visitation_entropy(stats: &VisitationStats) -> Result<f64> {
    Ok(entropy(&stats.weights()?))
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `sum_s w(s) KL(pi_final(.|s) || pi_BC(.|s))` with `w` normalized to unit mass.
pub fn support_kl(
    final_pol: &[PolicyDistribution],
    bc_pol: &[PolicyDistribution],
    state_weights: &[f64],
) -> Result<f64> {
    if final_pol.len() != bc_pol.len() || final_pol.len() != state_weights.len() {
        return Err(Error::Dimension("support KL inputs disagree on state count".into()));
    }
    if state_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Metric("state weights must be finite and non-negative".into()));
    }
    let z: f64 = state_weights.iter().sum();
    if z <= 0.0 {
        return Err(Error::Metric("state weights have zero mass".into()));
    }
    let mut total = 0.0;
    for ((p, q), w) in final_pol.iter().zip(bc_pol).zip(state_weights) {
        if *w == 0.0 {
            continue;
        }
        if p.len() != q.len() {
            return Err(Error::Dimension("support KL action counts differ".into()));
        }
        total += w / z * kl(p.probs(), q.probs());
    }
    Ok(total)
}

/// Fraction of `states` whose final-policy argmax has BC probability below `eps`.
pub fn action_novelty_rate(
    final_pol: &[PolicyDistribution],
    bc_pol: &[PolicyDistribution],
    states: &[usize],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Metric(format!("novelty threshold must lie in (0, 1), got {eps}")));
    }
    if states.is_empty() {
        log::warn!("action novelty rate over an empty state list; reporting 0");
        return Ok(0.0);
    }
    let mut novel = 0usize;
    for &s in states {
        let (p, q) = match (final_pol.get(s), bc_pol.get(s)) {
            (Some(p), Some(q)) => (p, q),
            _ => return Err(Error::Dimension(format!("state {s} outside the policy tables"))),
        };
        if q.probs()[p.argmax()] < eps {
            novel += 1;
        }
    }
    Ok(novel as f64 / states.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowRates {
    pub pre_guard_violation_rate: f64,
    pub near_miss_rate: f64,
}

/// Whether a safe action sits within `margin` (Euclidean) of an unsafe one at `s`.
pub fn is_near_miss(spec: &SafetySpec, s: usize, a: usize, margin: f64) -> bool {
    if !spec.is_safe(s, a) {
        return false;
    }
    let e = spec.embedding(a);
    (0..spec.num_actions())
        .filter(|&b| !spec.is_safe(s, b))
        .any(|b| {
            let d2: f64 = e
                .iter()
                .zip(spec.embedding(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d2.sqrt() < margin
        })
}

/// Pre-guard violation and near-miss rates of the proposed actions.
pub fn shadow_rates(records: &[TransitionRecord], spec: &SafetySpec, margin: f64) -> Result<ShadowRates> {
    if records.is_empty() {
        return Err(Error::Metric("shadow rates of an empty record list".into()));
    }
    let (mut violations, mut near) = (0usize, 0usize);
    for r in records {
        let a = r
            .a_prop
            .ok_or_else(|| Error::Metric("record without a proposed action".into()))?;
        if !spec.is_safe(r.s, a) {
            violations += 1;
        } else if is_near_miss(spec, r.s, a, margin) {
            near += 1;
        }
    }
    let n = records.len() as f64;
    Ok(ShadowRates {
        pre_guard_violation_rate: violations as f64 / n,
        near_miss_rate: near as f64 / n,
    })
}

/// [`margin_scan_with`] against a freshly solved guarded optimum.
pub fn margin_scan(
    pol: &[PolicyDistribution],
    mdp: &TabularMdp,
    spec: &SafetySpec,
    guard_on: bool,
) -> Result<f64> {
    let q_star = solve_guarded_value_iteration(mdp, spec, 1e-10, 1_000_000)?.q;
    margin_scan_with(pol, &q_star, spec, guard_on)
}

/// Fraction of boundary states where the greedy (optionally projected) action
/// is safe and within [`MARGIN_SCAN_TOL_Q`] of the best safe value in `q_star`.
pub fn margin_scan_with(
    pol: &[PolicyDistribution],
    q_star: &QTable,
    spec: &SafetySpec,
    guard_on: bool,
) -> Result<f64> {
    let boundary = spec.boundary_states();
    if boundary.is_empty() {
        return Err(Error::Metric("margin scan needs at least one boundary state".into()));
    }
    if pol.len() != spec.num_states() || q_star.num_states() != spec.num_states() {
        return Err(Error::Dimension("margin scan inputs disagree on state count".into()));
    }
    let mut hits = 0usize;
    for &s in &boundary {
        let mut a = pol[s].argmax();
        if guard_on {
            a = project_action(spec, s, a).exec_action;
        }
        if !spec.is_safe(s, a) {
            continue;
        }
        let best = spec
            .safe_actions(s)
            .iter()
            .map(|&b| q_star.get(s, b))
            .fold(f64::NEG_INFINITY, f64::max);
        if q_star.get(s, a) >= best - MARGIN_SCAN_TOL_Q {
            hits += 1;
        }
    }
    Ok(hits as f64 / boundary.len() as f64)
}
