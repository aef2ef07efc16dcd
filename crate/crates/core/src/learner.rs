//! The reward-seeking learner: a tabular soft-Q ensemble with pessimistic
//! (min over members) targets and an explicit softmax policy.
//!
//! The actor objective never looks at the safety predicate. The predicate only
//! enters through the backup target, where the next-state policy is
//! renormalized onto the safe set before taking the expectation.

use crate::guardian::{entropy, renormalize_policy_safe, PolicyDistribution};
use crate::mdp::{QTable, SafetySpec};
use crate::sampling::TransitionRecord;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sign of the entropy bonus in the backup target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `E[Q] - alpha H`. Config value `paper_eq11`.
    #[serde(rename = "paper_eq11")]
    MinusEntropy,
    /// `E[Q] + alpha H`, which equals `E[Q - alpha log pi]` (the soft value).
    SoftConsistent,
}

/// Which next-state policy the backup averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackupMode {
    /// Learner policy renormalized onto the safe set.
    Guarded,
    /// Raw learner policy over all actions (execution-only shielding baseline).
    Unguarded,
}

/// Source of the next-state action distribution inside the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// The learner's softmax policy (soft actor-critic style).
    Actor,
    /// Hard max of the pessimistic target over the admissible actions
    /// (Q-learning; the `alpha -> 0` limit of the soft backup).
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub entropy_sign: EntropySign,
    pub backup_mode: BackupMode,
    pub ensemble_size: usize,
    /// Per-pair rate decay exponent `w`: the step at the n-th update of
    /// `(s, a)` is `critic_lr / (1 + n)^w`. Zero keeps the rate constant.
    #[serde(default)]
    pub critic_lr_decay: f64,
    /// Probability that a member trains on a given sample. 1.0 updates every
    /// member on every sample.
    #[serde(default = "one")]
    pub bootstrap_prob: f64,
    #[serde(default = "default_target_policy")]
    pub target_policy: TargetPolicy,
}

fn one() -> f64 {
    1.0
}

fn default_target_policy() -> TargetPolicy {
    TargetPolicy::Actor
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            tau: 0.05,
            gamma: 0.95,
            critic_lr: 0.1,
            actor_lr: 1.0,
            entropy_sign: EntropySign::SoftConsistent,
            backup_mode: BackupMode::Guarded,
            ensemble_size: 2,
            critic_lr_decay: 0.0,
            bootstrap_prob: 1.0,
            target_policy: TargetPolicy::Actor,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.critic_lr > 0.0) || !(self.actor_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.ensemble_size < 2 {
            return bad(format!("ensemble needs at least 2 members, got {}", self.ensemble_size));
        }
        if !(self.critic_lr_decay >= 0.0) {
            return bad(format!("critic_lr_decay must be >= 0, got {}", self.critic_lr_decay));
        }
        if !(self.bootstrap_prob > 0.0 && self.bootstrap_prob <= 1.0) {
            return bad(format!("bootstrap_prob must lie in (0, 1], got {}", self.bootstrap_prob));
        }
        Ok(())
    }
}

/// N critic tables with paired target tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEnsemble {
    pub members: Vec<QTable>,
    pub targets: Vec<QTable>,
}

/// Half-width of the uniform initialization noise.
pub const INIT_NOISE: f64 = 0.1;

impl QEnsemble {
    /// Members drawn independently from `U[-0.1, 0.1]`; targets start as copies.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        num_states: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Self {
        let members: Vec<QTable> = (0..n)
            .map(|_| {
                let values = (0..num_states * num_actions)
                    .map(|_| rng.random_range(-INIT_NOISE..=INIT_NOISE))
                    .collect();
                QTable::from_flat(num_states, num_actions, values).expect("shape")
            })
            .collect();
        Self {
            targets: members.clone(),
            members,
        }
    }

    pub fn from_members(members: Vec<QTable>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config("ensemble needs at least 2 members".into()));
        }
        if members.iter().any(|m| !m.same_shape(&members[0])) {
            return Err(Error::Dimension("ensemble members differ in shape".into()));
        }
        Ok(Self {
            targets: members.clone(),
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.members[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.members[0].num_actions()
    }

    /// Element-wise minimum over the members (or targets) as a table.
    pub fn min_table(&self, use_targets: bool) -> QTable {
        let tables = if use_targets { &self.targets } else { &self.members };
        let mut out = tables[0].clone();
        for t in &tables[1..] {
            for (o, v) in out.values_mut().iter_mut().zip(t.values()) {
                *o = o.min(*v);
            }
        }
        out
    }
}

/// `min_i Q_i(s, a)` over members, or over targets when `use_targets`.
pub fn pessimistic_q(ens: &QEnsemble, s: usize, a: usize, use_targets: bool) -> f64 {
    let tables = if use_targets { &ens.targets } else { &ens.members };
    tables.iter().map(|q| q.get(s, a)).fold(f64::INFINITY, f64::min)
}

/// Softmax policy parameterized by one logit per state-action pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl PolicyTable {
    /// All-zero logits (uniform policy).
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            logits: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "policy has {} logits, expected {}",
                logits.len(),
                num_states * num_actions
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Dimension("non-finite logit".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    /// Policy that puts (nearly) all mass on `actions[s]`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Self {
        let mut p = Self::uniform(actions.len(), num_actions);
        for (s, &a) in actions.iter().enumerate() {
            p.logits[s * num_actions + a] = 50.0;
        }
        p
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn state_logits(&self, s: usize) -> &[f64] {
        &self.logits[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn distribution(&self, s: usize) -> PolicyDistribution {
        PolicyDistribution::softmax(self.state_logits(s))
    }

    pub fn distributions(&self) -> Vec<PolicyDistribution> {
        (0..self.num_states).map(|s| self.distribution(s)).collect()
    }

    fn log_probs(&self, s: usize) -> Vec<f64> {
        let l = self.state_logits(s);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        l.iter().map(|x| x - lse).collect()
    }
}

/// Backup target plus whether the safe renormalization hit the starvation fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackupTarget {
    pub value: f64,
    pub starved: bool,
}

/// Pessimistic soft backup target for one transition.
///
/// `y = r + gamma * (sum_a' pi(a') Q'_min(s', a') + sign * alpha * H(pi))`, where
/// `pi` is the learner policy at `s'` renormalized onto the safe set (guarded
/// mode) or left raw (unguarded mode). Terminal transitions return `r`.
pub fn compute_guarded_target(
    tr: &TransitionRecord,
    pol: &PolicyTable,
    ens: &QEnsemble,
    spec: &SafetySpec,
    cfg: &LearnerConfig,
) -> BackupTarget {
    if tr.done || cfg.gamma == 0.0 {
        return BackupTarget {
            value: tr.r,
            starved: false,
        };
    }
    let s2 = tr.s_next;
    if cfg.target_policy == TargetPolicy::Greedy {
        let best = match cfg.backup_mode {
            BackupMode::Guarded => spec
                .safe_actions(s2)
                .iter()
                .map(|&a| pessimistic_q(ens, s2, a, true))
                .fold(f64::NEG_INFINITY, f64::max),
            BackupMode::Unguarded => (0..ens.num_actions())
                .map(|a| pessimistic_q(ens, s2, a, true))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        return BackupTarget {
            value: tr.r + cfg.gamma * best,
            starved: false,
        };
    }
    let raw = pol.distribution(s2);
    let (pi, starved) = match cfg.backup_mode {
        BackupMode::Guarded => {
            let out = renormalize_policy_safe(&raw, s2, spec);
            (out.dist, out.starved)
        }
        BackupMode::Unguarded => (raw, false),
    };
    let mut expected = 0.0;
    for (a, p) in pi.probs().iter().enumerate() {
        // skip zero-mass actions so unsafe entries are never read in guarded mode
        if *p > 0.0 {
            expected += p * pessimistic_q(ens, s2, a, true);
        }
    }
    let sign = match cfg.entropy_sign {
        EntropySign::MinusEntropy => -1.0,
        EntropySign::SoftConsistent => 1.0,
    };
    BackupTarget {
        value: tr.r + cfg.gamma * (expected + sign * cfg.alpha * entropy(pi.probs())),
        starved,
    }
}

/// Tabular squared-error step with a constant rate; see [`update_critics_with`].
pub fn update_critics(
    ens: &mut QEnsemble,
    batch: &[TransitionRecord],
    targets: &[f64],
    critic_lr: f64,
) -> Result<Vec<f64>> {
    update_critics_with(ens, batch, targets, |_, _| critic_lr, |_, _| true)
}

/// Moves `Q_i(s, a)` by `rate(s, a) * (y - Q_i(s, a))` for each sample in
/// batch order, skipping members for which `include(member, sample)` is false.
/// `rate` is called once per sample. Returns each member's mean squared error
/// before any update.
pub fn update_critics_with(
    ens: &mut QEnsemble,
    batch: &[TransitionRecord],
    targets: &[f64],
    mut rate: impl FnMut(usize, usize) -> f64,
    mut include: impl FnMut(usize, usize) -> bool,
) -> Result<Vec<f64>> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "critic update needs matching non-empty batch and targets, got {} and {}",
            batch.len(),
            targets.len()
        )));
    }
    let n = batch.len() as f64;
    let losses = ens
        .members
        .iter()
        .map(|q| {
            batch
                .iter()
                .zip(targets)
                .map(|(tr, y)| (q.get(tr.s, tr.a_exec) - y).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    for (k, (tr, y)) in batch.iter().zip(targets).enumerate() {
        let lr = rate(tr.s, tr.a_exec);
        for (i, q) in ens.members.iter_mut().enumerate() {
            if include(i, k) {
                let v = q.get_mut(tr.s, tr.a_exec);
                *v += lr * (y - *v);
            }
        }
    }
    Ok(losses)
}

/// Mean over `states` of `sum_a pi(a|s) (alpha log pi(a|s) - min_i Q_i(s, a))`.
pub fn actor_loss(pol: &PolicyTable, states: &[usize], ens: &QEnsemble, alpha: f64) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states
        .iter()
        .map(|&s| {
            let logp = pol.log_probs(s);
            logp.iter()
                .enumerate()
                .map(|(a, lp)| lp.exp() * (alpha * lp - pessimistic_q(ens, s, a, false)))
                .sum::<f64>()
        })
        .sum::<f64>()
        / states.len() as f64
}

/// Analytic gradient of [`actor_loss`] with respect to every logit:
/// `dL/dz_j = p_j (f_j - L_s)` with `f_j = alpha log p_j - Q_min(s, j)`,
/// averaged over the state list.
pub fn actor_gradient(pol: &PolicyTable, states: &[usize], ens: &QEnsemble, alpha: f64) -> Vec<f64> {
    let na = pol.num_actions;
    let mut grad = vec![0.0; pol.logits.len()];
    if states.is_empty() {
        return grad;
    }
    let w = 1.0 / states.len() as f64;
    for &s in states {
        let logp = pol.log_probs(s);
        let f: Vec<f64> = (0..na)
            .map(|a| alpha * logp[a] - pessimistic_q(ens, s, a, false))
            .collect();
        let loss: f64 = (0..na).map(|a| logp[a].exp() * f[a]).sum();
        for a in 0..na {
            grad[s * na + a] += w * logp[a].exp() * (f[a] - loss);
        }
    }
    grad
}

/// One gradient-descent step on [`actor_loss`]; returns the pre-update loss.
pub fn update_actor(
    pol: &mut PolicyTable,
    states: &[usize],
    ens: &QEnsemble,
    cfg: &LearnerConfig,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Dimension("actor update needs at least one state".into()));
    }
    let loss = actor_loss(pol, states, ens, cfg.alpha);
    let grad = actor_gradient(pol, states, ens, cfg.alpha);
    for (l, g) in pol.logits.iter_mut().zip(grad) {
        *l -= cfg.actor_lr * g;
    }
    Ok(loss)
}

/// Polyak averaging: `target <- tau * member + (1 - tau) * target`.
pub fn soft_update_targets(ens: &mut QEnsemble, tau: f64) {
    for (m, t) in ens.members.iter().zip(ens.targets.iter_mut()) {
        for (tv, mv) in t.values_mut().iter_mut().zip(m.values()) {
            *tv = tau * mv + (1.0 - tau) * *tv;
        }
    }
}

/// Mean over the batch pairs of the population variance across members.
pub fn ensemble_variance<'a>(
    ens: &QEnsemble,
    batch: impl IntoIterator<Item = &'a TransitionRecord>,
) -> Result<f64> {
    let n = ens.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for tr in batch {
        let mean = ens.members.iter().map(|q| q.get(tr.s, tr.a_exec)).sum::<f64>() / n;
        let var = ens
            .members
            .iter()
            .map(|q| (q.get(tr.s, tr.a_exec) - mean).powi(2))
            .sum::<f64>()
            / n;
        total += var;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Dimension("ensemble variance needs a non-empty batch".into()));
    }
    Ok(total / count as f64)
}

/// Statistics of one [`Learner::update`] call, all measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub td_error: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub ensemble_variance: f64,
    pub starved: usize,
}

/// Owns the ensemble, the policy and per-pair update counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub config: LearnerConfig,
    pub ensemble: QEnsemble,
    pub policy: PolicyTable,
    pub step: u64,
    visits: Vec<u64>,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(
        config: LearnerConfig,
        num_states: usize,
        num_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ensemble = QEnsemble::random(config.ensemble_size, num_states, num_actions, rng);
        Ok(Self {
            config,
            ensemble,
            policy: PolicyTable::uniform(num_states, num_actions),
            step: 0,
            visits: vec![0; num_states * num_actions],
        })
    }

    pub fn targets_for(&self, batch: &[TransitionRecord], spec: &SafetySpec) -> Vec<BackupTarget> {
        batch
            .iter()
            .map(|tr| compute_guarded_target(tr, &self.policy, &self.ensemble, spec, &self.config))
            .collect()
    }

    /// Critic step on guarded (or unguarded, per config) targets, one actor
    /// step on the batch states, then a Polyak target update.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[TransitionRecord],
        spec: &SafetySpec,
        rng: &mut R,
    ) -> Result<UpdateStats> {
        let targets = self.targets_for(batch, spec);
        let starved = targets.iter().filter(|t| t.starved).count();
        let ys: Vec<f64> = targets.iter().map(|t| t.value).collect();
        let td_error = batch
            .iter()
            .zip(&ys)
            .map(|(tr, y)| (pessimistic_q(&self.ensemble, tr.s, tr.a_exec, false) - y).abs())
            .sum::<f64>()
            / batch.len().max(1) as f64;
        let variance = ensemble_variance(&self.ensemble, batch)?;

        let na = self.ensemble.num_actions();
        let (base, decay) = (self.config.critic_lr, self.config.critic_lr_decay);
        let p = self.config.bootstrap_prob;
        let masks: Vec<bool> = if p < 1.0 {
            (0..batch.len() * self.ensemble.len())
                .map(|_| rng.random::<f64>() < p)
                .collect()
        } else {
            Vec::new()
        };
        let n_members = self.ensemble.len();
        let visits = &mut self.visits;
        let losses = update_critics_with(
            &mut self.ensemble,
            batch,
            &ys,
            |s, a| {
                let n = &mut visits[s * na + a];
                let lr = if decay > 0.0 {
                    base / (1.0 + *n as f64).powf(decay)
                } else {
                    base
                };
                *n += 1;
                lr
            },
            |i, k| masks.is_empty() || masks[k * n_members + i],
        )?;
        let critic_loss = losses.iter().sum::<f64>() / losses.len() as f64;

        let states: Vec<usize> = batch.iter().map(|tr| tr.s).collect();
        let actor_loss = update_actor(&mut self.policy, &states, &self.ensemble, &self.config)?;
        soft_update_targets(&mut self.ensemble, self.config.tau);
        self.step += 1;
        Ok(UpdateStats {
            td_error,
            critic_loss,
            actor_loss,
            ensemble_variance: variance,
            starved,
        })
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let l: Learner = serde_json::from_str(text)?;
        l.config.validate()?;
        Ok(l)
    }
}
