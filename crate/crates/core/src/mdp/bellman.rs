use super::{QTable, SafetySpec, TabularMdp};
use crate::par;
use crate::{Error, Result};

/// `max_{a' in A_safe(s')} Q(s', a')` for every state.
pub fn safe_state_values(q: &QTable, spec: &SafetySpec) -> Vec<f64> {
    (0..q.num_states())
        .map(|s| {
            spec.safe_actions(s)
                .iter()
                .map(|&a| q.get(s, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn check_dims(q: &QTable, mdp: &TabularMdp, spec: &SafetySpec) -> Result<()> {
    q.check_shape(mdp)?;
    spec.check_compatible(mdp)
}

fn backup_row(mdp: &TabularMdp, v_safe: &[f64], s: usize) -> Vec<f64> {
    let gamma = mdp.gamma();
    (0..mdp.num_actions())
        .map(|a| {
            let expected: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(v_safe)
                .map(|(p, v)| p * v)
                .sum();
            mdp.reward(s, a) + gamma * expected
        })
        .collect()
}

/// Guarded Bellman optimality backup:
/// `(T Q)(s,a) = R(s,a) + gamma * sum_s' P(s'|s,a) * max_{a' safe at s'} Q(s',a')`.
///
/// Defined on all of `S x A`; only the inner max is restricted to safe actions.
pub fn apply_guarded_bellman(q: &QTable, mdp: &TabularMdp, spec: &SafetySpec) -> Result<QTable> {
    check_dims(q, mdp, spec)?;
    let v_safe = safe_state_values(q, spec);
    let rows = par::map_indexed(mdp.num_states(), |s| backup_row(mdp, &v_safe, s));
    QTable::from_flat(mdp.num_states(), mdp.num_actions(), rows.concat())
}

/// Single-threaded [`apply_guarded_bellman`].
pub fn apply_guarded_bellman_sequential(
    q: &QTable,
    mdp: &TabularMdp,
    spec: &SafetySpec,
) -> Result<QTable> {
    check_dims(q, mdp, spec)?;
    let v_safe = safe_state_values(q, spec);
    let rows = par::map_indexed_sequential(mdp.num_states(), |s| backup_row(mdp, &v_safe, s));
    QTable::from_flat(mdp.num_states(), mdp.num_actions(), rows.concat())
}

/// `max_{s,a} |Q1 - Q2|`.
pub fn max_norm_distance(q1: &QTable, q2: &QTable) -> Result<f64> {
    if !q1.same_shape(q2) {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            q1.num_states(),
            q1.num_actions(),
            q2.num_states(),
            q2.num_actions()
        )));
    }
    Ok(q1
        .values()
        .iter()
        .zip(q2.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Both sides of `|max f - max g| <= max |f - g|` over a shared, non-empty
/// index set. Returns `(lhs, rhs)`.
pub fn max_gap(f: &[f64], g: &[f64]) -> Result<(f64, f64)> {
    if f.is_empty() || f.len() != g.len() {
        return Err(Error::Dimension(format!(
            "max_gap needs equal non-empty lists, got {} and {}",
            f.len(),
            g.len()
        )));
    }
    let max_f = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_g = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rhs = f.iter().zip(g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(((max_f - max_g).abs(), rhs))
}

/// Both sides of the contraction inequality for one pair of Q tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionCheck {
    /// `||T Q1 - T Q2||_inf`
    pub lhs: f64,
    /// `gamma * ||Q1 - Q2||_inf`
    pub rhs: f64,
}

impl ContractionCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs + slack
    }
}

pub fn assert_contraction_pair(
    mdp: &TabularMdp,
    spec: &SafetySpec,
    q1: &QTable,
    q2: &QTable,
) -> Result<ContractionCheck> {
    let t1 = apply_guarded_bellman(q1, mdp, spec)?;
    let t2 = apply_guarded_bellman(q2, mdp, spec)?;
    Ok(ContractionCheck {
        lhs: max_norm_distance(&t1, &t2)?,
        rhs: mdp.gamma() * max_norm_distance(q1, q2)?,
    })
}

/// Output of [`solve_guarded_value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub q: QTable,
    /// Number of operator applications performed.
    pub iterations: usize,
    /// `r_k = ||Q_k - Q_{k-1}||_inf` for each sweep `k`.
    pub residuals: Vec<f64>,
}

impl ValueIteration {
    /// Distance bound to the fixed point implied by the last residual:
    /// `||Q_k - Q*|| <= r_k * gamma / (1 - gamma)`.
    pub fn error_bound(&self, gamma: f64) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0) * gamma / (1.0 - gamma)
    }
}

/// Guarded value iteration from `Q = 0`.
///
/// Stops at the first sweep `k` with `gamma * r_k <= tol`. Since the operator
/// is a gamma-contraction, `||T Q_k - Q_k|| <= gamma * r_k`, so the returned
/// table satisfies the Bellman-residual tolerance.
pub fn solve_guarded_value_iteration(
    mdp: &TabularMdp,
    spec: &SafetySpec,
    tol: f64,
    max_iters: usize,
) -> Result<ValueIteration> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    spec.check_compatible(mdp)?;
    let gamma = mdp.gamma();
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    let mut residuals = Vec::new();
    for k in 1..=max_iters {
        let next = apply_guarded_bellman(&q, mdp, spec)?;
        let r = max_norm_distance(&next, &q)?;
        residuals.push(r);
        q = next;
        if gamma * r <= tol || r == 0.0 {
            return Ok(ValueIteration {
                q,
                iterations: k,
                residuals,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iters,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        tol,
    })
}
