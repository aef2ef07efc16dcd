//! Finite MDPs, safety predicates and the guarded Bellman operator.
//!
//! Tables are dense and row-major: `transition[(s * A + a) * S + s']`,
//! `reward[s * A + a]`. All operations are pure functions of their inputs.

mod bellman;
mod document;
mod pruned;

pub use bellman::{
    apply_guarded_bellman, apply_guarded_bellman_sequential, assert_contraction_pair,
    max_gap, max_norm_distance, safe_state_values, solve_guarded_value_iteration,
    ContractionCheck, ValueIteration,
};
pub use document::MdpDocument;
pub use pruned::{PrunedMdp, PrunedSolution};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row sums must hit 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Finite MDP `(S, A, P, R, gamma)` plus episodic bookkeeping: terminal and
/// hazard flags per state and the initial state for rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocumentCore", into = "MdpDocumentCore")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
    terminal: Vec<bool>,
    hazard: Vec<bool>,
    initial_state: usize,
}

impl TabularMdp {
    /// Builds and validates an MDP from nested `P[s][a][s']` and `R[s][a]`.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        let num_states = transition.len();
        if num_states == 0 {
            return Err(Error::Dimension("MDP needs at least one state".into()));
        }
        let num_actions = transition[0].len();
        if num_actions == 0 {
            return Err(Error::Dimension("MDP needs at least one action".into()));
        }
        if reward.len() != num_states {
            return Err(Error::Dimension(format!(
                "reward has {} rows, expected {num_states}",
                reward.len()
            )));
        }
        let mut flat_p = Vec::with_capacity(num_states * num_actions * num_states);
        let mut flat_r = Vec::with_capacity(num_states * num_actions);
        for (s, (p_rows, r_row)) in transition.iter().zip(&reward).enumerate() {
            if p_rows.len() != num_actions || r_row.len() != num_actions {
                return Err(Error::Dimension(format!(
                    "state {s} has {} transition rows and {} rewards, expected {num_actions}",
                    p_rows.len(),
                    r_row.len()
                )));
            }
            for row in p_rows {
                if row.len() != num_states {
                    return Err(Error::Dimension(format!(
                        "transition row of state {s} has length {}, expected {num_states}",
                        row.len()
                    )));
                }
                flat_p.extend_from_slice(row);
            }
            flat_r.extend_from_slice(r_row);
        }
        Self::from_flat(num_states, num_actions, flat_p, flat_r, gamma)
    }

    /// Builds from already-flattened row-major tables.
    pub fn from_flat(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::Dimension("MDP needs at least one state and action".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::Dimension(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                num_states * num_actions * num_states
            )));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                num_states * num_actions
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Gamma(gamma));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let start = (s * num_actions + a) * num_states;
                let row = &transition[start..start + num_states];
                if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return Err(Error::TransitionRow {
                        state: s,
                        action: a,
                        reason: format!("entry {p} is negative or not finite"),
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::TransitionRow {
                        state: s,
                        action: a,
                        reason: format!("row sums to {sum}"),
                    });
                }
                let r = reward[s * num_actions + a];
                if !r.is_finite() {
                    return Err(Error::Reward { state: s, action: a, value: r });
                }
            }
        }
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            r_max,
            terminal: vec![false; num_states],
            hazard: vec![false; num_states],
            initial_state: 0,
        })
    }

    /// Checks rewards against a stated bound and records it.
    pub fn with_reward_bound(mut self, r_max: f64) -> Result<Self> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let r = self.reward(s, a);
                if r.abs() > r_max {
                    return Err(Error::Reward { state: s, action: a, value: r });
                }
            }
        }
        self.r_max = r_max;
        Ok(self)
    }

    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.num_states {
            return Err(Error::Dimension(format!(
                "terminal flags have length {}, expected {}",
                terminal.len(),
                self.num_states
            )));
        }
        self.terminal = terminal;
        Ok(self)
    }

    pub fn with_hazard(mut self, hazard: Vec<bool>) -> Result<Self> {
        if hazard.len() != self.num_states {
            return Err(Error::Dimension(format!(
                "hazard flags have length {}, expected {}",
                hazard.len(),
                self.num_states
            )));
        }
        self.hazard = hazard;
        Ok(self)
    }

    pub fn with_initial_state(mut self, s: usize) -> Result<Self> {
        if s >= self.num_states {
            return Err(Error::Dimension(format!("initial state {s} out of range")));
        }
        self.initial_state = s;
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn is_hazard(&self, s: usize) -> bool {
        self.hazard[s]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn hazard_flags(&self) -> &[bool] {
        &self.hazard
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    /// `P(. | s, a)` as a slice over next states.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Gamma(gamma));
        }
        self.gamma = gamma;
        Ok(self)
    }
}

/// The safety predicate `g(s, a)` and the per-action embeddings that give the
/// projection its distance metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SafetySpecRaw", into = "SafetySpecRaw")]
pub struct SafetySpec {
    num_states: usize,
    num_actions: usize,
    safe: Vec<bool>,
    embedding: Vec<Vec<f64>>,
    safe_lists: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct SafetySpecRaw {
    safe: Vec<Vec<bool>>,
    action_embedding: Vec<Vec<f64>>,
}

impl TryFrom<SafetySpecRaw> for SafetySpec {
    type Error = Error;
    fn try_from(raw: SafetySpecRaw) -> Result<Self> {
        SafetySpec::new(raw.safe, raw.action_embedding)
    }
}

impl From<SafetySpec> for SafetySpecRaw {
    fn from(spec: SafetySpec) -> Self {
        SafetySpecRaw {
            safe: spec.safe_table(),
            action_embedding: spec.embedding,
        }
    }
}

impl SafetySpec {
    /// Validates non-empty safe sets and finite, pairwise-distinct embeddings
    /// of a common dimension.
    pub fn new(safe: Vec<Vec<bool>>, embedding: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = safe.len();
        if num_states == 0 {
            return Err(Error::Dimension("safety table has no states".into()));
        }
        let num_actions = embedding.len();
        if num_actions == 0 {
            return Err(Error::Embedding("no action embeddings".into()));
        }
        let dim = embedding[0].len();
        for (a, e) in embedding.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::Embedding(format!(
                    "action {a} has dimension {}, expected {dim}",
                    e.len()
                )));
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Embedding(format!("action {a} has a non-finite component")));
            }
            for (b, other) in embedding.iter().enumerate().take(a) {
                if other == e {
                    return Err(Error::Embedding(format!(
                        "actions {b} and {a} share the same embedding"
                    )));
                }
            }
        }
        let mut flat = Vec::with_capacity(num_states * num_actions);
        let mut safe_lists = Vec::with_capacity(num_states);
        for (s, row) in safe.iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::Dimension(format!(
                    "safety row of state {s} has length {}, expected {num_actions}",
                    row.len()
                )));
            }
            let list: Vec<usize> = (0..num_actions).filter(|&a| row[a]).collect();
            if list.is_empty() {
                return Err(Error::EmptySafeSet(s));
            }
            flat.extend_from_slice(row);
            safe_lists.push(list);
        }
        Ok(Self {
            num_states,
            num_actions,
            safe: flat,
            embedding,
            safe_lists,
        })
    }

    /// Predicate that admits every action, with one-hot embeddings.
    pub fn all_safe(num_states: usize, num_actions: usize) -> Self {
        let embedding = (0..num_actions)
            .map(|a| (0..num_actions).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(vec![vec![true; num_actions]; num_states], embedding)
            .expect("all-safe predicate is valid")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn is_safe(&self, s: usize, a: usize) -> bool {
        self.safe[s * self.num_actions + a]
    }

    /// `A_safe(s)` in ascending action order; never empty.
    #[inline]
    pub fn safe_actions(&self, s: usize) -> &[usize] {
        &self.safe_lists[s]
    }

    pub fn embedding(&self, a: usize) -> &[f64] {
        &self.embedding[a]
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embedding
    }

    /// States with at least one unsafe action.
    pub fn boundary_states(&self) -> Vec<usize> {
        (0..self.num_states)
            .filter(|&s| self.safe_lists[s].len() < self.num_actions)
            .collect()
    }

    pub fn safe_table(&self) -> Vec<Vec<bool>> {
        self.safe
            .chunks(self.num_actions)
            .map(|row| row.to_vec())
            .collect()
    }

    /// Rejects a predicate whose shape does not match `mdp`.
    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::Dimension(format!(
                "safety spec is {}x{}, MDP is {}x{}",
                self.num_states,
                self.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }
}

/// `safe_actions(spec, s)`.
pub fn safe_actions(spec: &SafetySpec, s: usize) -> Vec<usize> {
    spec.safe_actions(s).to_vec()
}

/// State-action value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::filled(num_states, num_actions, 0.0)
    }

    pub fn filled(num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
        }
    }

    pub fn from_flat(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "Q table has {} entries, expected {}",
                values.len(),
                num_states * num_actions
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("Q table has non-finite entries".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::Dimension("ragged Q table rows".into()));
        }
        Self::from_flat(num_states, num_actions, rows.concat())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    #[inline]
    pub fn get_mut(&mut self, s: usize, a: usize) -> &mut f64 {
        &mut self.values[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.num_actions).map(<[f64]>::to_vec).collect()
    }

    pub fn same_shape(&self, other: &QTable) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    pub fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::Dimension(format!(
                "Q table is {}x{}, MDP is {}x{}",
                self.num_states,
                self.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        Ok(())
    }
}

/// Serde shape of a bare `TabularMdp` (without safety information).
#[derive(Serialize, Deserialize)]
struct MdpDocumentCore {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hazard: Option<Vec<bool>>,
    #[serde(default)]
    initial_state: usize,
}

impl TryFrom<MdpDocumentCore> for TabularMdp {
    type Error = Error;
    fn try_from(doc: MdpDocumentCore) -> Result<Self> {
        let mdp = TabularMdp::new(doc.transition, doc.reward, doc.gamma)?;
        if mdp.num_states() != doc.num_states || mdp.num_actions() != doc.num_actions {
            return Err(Error::Dimension(format!(
                "declared {}x{} but tables are {}x{}",
                doc.num_states,
                doc.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        let mut mdp = mdp.with_initial_state(doc.initial_state)?;
        if let Some(r_max) = doc.r_max {
            mdp = mdp.with_reward_bound(r_max)?;
        }
        if let Some(t) = doc.terminal {
            mdp = mdp.with_terminal(t)?;
        }
        if let Some(h) = doc.hazard {
            mdp = mdp.with_hazard(h)?;
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpDocumentCore {
    fn from(mdp: TabularMdp) -> Self {
        let s = mdp.num_states;
        let a = mdp.num_actions;
        MdpDocumentCore {
            num_states: s,
            num_actions: a,
            gamma: mdp.gamma,
            transition: (0..s)
                .map(|i| (0..a).map(|j| mdp.transition_row(i, j).to_vec()).collect())
                .collect(),
            reward: mdp.reward.chunks(a).map(<[f64]>::to_vec).collect(),
            r_max: Some(mdp.r_max),
            terminal: mdp.terminal.iter().any(|t| *t).then(|| mdp.terminal.clone()),
            hazard: mdp.hazard.iter().any(|h| *h).then(|| mdp.hazard.clone()),
            initial_state: mdp.initial_state,
        }
    }
}
