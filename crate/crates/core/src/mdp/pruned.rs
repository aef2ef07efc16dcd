//! Unsafe-action pruning and standard (unguarded) value iteration on the
//! result. Serves as an independent route to the guarded fixed point: it
//! iterates state values over per-state action lists instead of applying the
//! guarded operator to a full Q table.

use super::{QTable, SafetySpec, TabularMdp};
use crate::{Error, Result};

/// An MDP whose action set varies by state: every unsafe action is deleted.
#[derive(Debug, Clone)]
pub struct PrunedMdp {
    gamma: f64,
    /// `actions[s]` lists `(original action id, reward, transition row)`.
    actions: Vec<Vec<(usize, f64, Vec<f64>)>>,
}

#[derive(Debug, Clone)]
pub struct PrunedSolution {
    /// Optimal state values of the pruned MDP.
    pub values: Vec<f64>,
    /// One-step lookahead `R(s,a) + gamma * E[V(s')]` for every original
    /// `(s, a)`, including the pruned ones.
    pub q: QTable,
    pub iterations: usize,
}

impl PrunedMdp {
    pub fn new(mdp: &TabularMdp, spec: &SafetySpec) -> Result<Self> {
        spec.check_compatible(mdp)?;
        let actions = (0..mdp.num_states())
            .map(|s| {
                (0..mdp.num_actions())
                    .filter(|&a| spec.is_safe(s, a))
                    .map(|a| (a, mdp.reward(s, a), mdp.transition_row(s, a).to_vec()))
                    .collect()
            })
            .collect();
        Ok(Self {
            gamma: mdp.gamma(),
            actions,
        })
    }

    pub fn num_states(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        self.actions[s].iter().map(|(a, _, _)| *a)
    }

    /// Standard value iteration on state values, stopping once successive
    /// iterates differ by at most `tol`.
    pub fn solve(&self, mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<PrunedSolution> {
        let n = self.num_states();
        let mut v = vec![0.0; n];
        let mut residual = f64::INFINITY;
        for k in 1..=max_iters {
            let next: Vec<f64> = self
                .actions
                .iter()
                .map(|acts| {
                    let mut best = f64::NEG_INFINITY;
                    for (_, r, row) in acts {
                        let mut ev = 0.0;
                        for (p, vn) in row.iter().zip(&v) {
                            ev += p * vn;
                        }
                        best = best.max(r + self.gamma * ev);
                    }
                    best
                })
                .collect();
            residual = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if residual <= tol {
                let mut q = QTable::zeros(n, mdp.num_actions());
                for s in 0..n {
                    for a in 0..mdp.num_actions() {
                        let mut ev = 0.0;
                        for (p, vn) in mdp.transition_row(s, a).iter().zip(&v) {
                            ev += p * vn;
                        }
                        q.set(s, a, mdp.reward(s, a) + self.gamma * ev);
                    }
                }
                return Ok(PrunedSolution {
                    values: v,
                    q,
                    iterations: k,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: max_iters,
            residual,
            tol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pruning_drops_unsafe_actions() {
        let mdp = TabularMdp::new(
            vec![vec![vec![1.0], vec![1.0], vec![1.0]]],
            vec![vec![1.0, 5.0, 2.0]],
            0.5,
        )
        .unwrap();
        let spec = SafetySpec::new(
            vec![vec![true, false, true]],
            vec![vec![0.0], vec![1.0], vec![2.0]],
        )
        .unwrap();
        let pruned = PrunedMdp::new(&mdp, &spec).unwrap();
        assert_eq!(pruned.actions(0).collect::<Vec<_>>(), vec![0, 2]);
        // single absorbing state: V = 2 / (1 - 0.5) = 4, the unsafe reward 5 is ignored
        let sol = pruned.solve(&mdp, 1e-12, 1000).unwrap();
        assert!((sol.values[0] - 4.0).abs() < 1e-9);
        // Q of the pruned action still uses the safe continuation value
        assert!((sol.q.get(0, 1) - (5.0 + 0.5 * 4.0)).abs() < 1e-9);
    }
}
