//! The hybrid offline/online training loop, its ablation variants, and
//! frozen-policy evaluation.

use crate::envs::{
    behavior_policy, build_cliff_grid, build_random_safe_mdp, collect_offline_dataset, env_step,
    Behavior, CollectConfig, GridParams, GridWorldSpec,
};
use crate::guardian::{project_action, PolicyDistribution};
use crate::learner::{BackupMode, Learner, LearnerConfig};
use crate::mdp::{MdpDocument, SafetySpec, TabularMdp};
use crate::metrics::{
    action_novelty_rate, coverage_count, is_near_miss, margin_scan, support_kl, visitation_entropy,
    VisitationStats, DEFAULT_NEAR_MISS_MARGIN, DEFAULT_NOVELTY_EPS,
};
use crate::par::derive_seed;
use crate::sampling::{
    append_online, derive_bc_policy, dss_mixing, dts_interval, sample_hybrid_batch, DssConfig,
    DtsConfig, OfflineDataset, OnlineBuffer, TransitionRecord,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

const EVAL_SALT: u64 = 0x6576_616c;
const TTFV_SALT: u64 = 0x7474_6676;
const OFFLINE_SALT: u64 = 0x6f66_666c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Projected execution and guarded backups.
    Guardian,
    /// Projected execution, unguarded backups.
    ExecMaskOnly,
    /// Raw execution, unguarded backups.
    NoGuard,
    /// No interaction; guarded backups on offline data only.
    OfflineOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Guardian,
        Variant::ExecMaskOnly,
        Variant::NoGuard,
        Variant::OfflineOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Guardian => "guardian",
            Variant::ExecMaskOnly => "exec_mask_only",
            Variant::NoGuard => "no_guard",
            Variant::OfflineOnly => "offline_only",
        }
    }

    pub fn backup_mode(self) -> BackupMode {
        match self {
            Variant::Guardian | Variant::OfflineOnly => BackupMode::Guarded,
            Variant::ExecMaskOnly | Variant::NoGuard => BackupMode::Unguarded,
        }
    }

    /// Whether proposed actions are projected before execution.
    pub fn projects(self) -> bool {
        !matches!(self, Variant::NoGuard)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the MDP and its safety predicate come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    /// ASCII map, top row first.
    Grid {
        map: Vec<String>,
        step_reward: f64,
        goal_reward: f64,
        hazard_reward: f64,
        #[serde(default)]
        slip_prob: f64,
        gamma: f64,
    },
    Random {
        num_states: usize,
        num_actions: usize,
        safe_fraction: f64,
        gamma: f64,
        seed: u64,
    },
    /// An MDP document on disk.
    File { path: PathBuf },
}

impl EnvConfig {
    pub fn build(&self) -> Result<(TabularMdp, SafetySpec)> {
        match self {
            EnvConfig::Grid { map, step_reward, goal_reward, hazard_reward, slip_prob, gamma } => {
                let params = GridParams {
                    step_reward: *step_reward,
                    goal_reward: *goal_reward,
                    hazard_reward: *hazard_reward,
                    slip_prob: *slip_prob,
                    gamma: *gamma,
                };
                build_cliff_grid(&GridWorldSpec::from_ascii(map, params)?)
            }
            EnvConfig::Random { num_states, num_actions, safe_fraction, gamma, seed } => {
                build_random_safe_mdp(*num_states, *num_actions, *safe_fraction, *gamma, *seed)
            }
            EnvConfig::File { path } => Ok(MdpDocument::load(path)?.into_parts()),
        }
    }
}

/// Offline data generated by rolling out a behavior policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOffline {
    pub behavior: Behavior,
    pub n_episodes: usize,
    pub max_ep_len: usize,
    #[serde(default = "yes")]
    pub guard: bool,
    /// Defaults to a stream derived from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_len: usize,
    /// Sample actions instead of taking the most probable one.
    #[serde(default)]
    pub stochastic: bool,
    pub ttfv_episodes: usize,
    pub ttfv_max_steps: usize,
    #[serde(default = "default_margin")]
    pub near_miss_margin: f64,
    #[serde(default = "default_novelty")]
    pub novelty_eps: f64,
}

fn default_margin() -> f64 {
    DEFAULT_NEAR_MISS_MARGIN
}

fn default_novelty() -> f64 {
    DEFAULT_NOVELTY_EPS
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 10,
            max_len: 100,
            stochastic: false,
            ttfv_episodes: 10,
            ttfv_max_steps: 200,
            near_miss_margin: DEFAULT_NEAR_MISS_MARGIN,
            novelty_eps: DEFAULT_NOVELTY_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub env: EnvConfig,
    pub learner: LearnerConfig,
    pub dts: DtsConfig,
    pub dss: DssConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub updates_per_step: usize,
    pub eval_every: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    pub seed: u64,
    pub online_buffer_capacity: usize,
    /// Online episodes are cut after this many steps.
    #[serde(default = "default_episode_len")]
    pub max_episode_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate_offline: Option<GenerateOffline>,
}

fn one() -> usize {
    1
}

fn default_episode_len() -> usize {
    100
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        self.dts.validate()?;
        self.dss.validate()?;
        if self.total_steps > 0
            && (self.dts.horizon != self.total_steps || self.dss.horizon != self.total_steps)
        {
            return Err(Error::Config(format!(
                "schedule horizons ({}, {}) must equal total_steps {}",
                self.dts.horizon, self.dss.horizon, self.total_steps
            )));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("updates_per_step", self.updates_per_step),
            ("online_buffer_capacity", self.online_buffer_capacity),
            ("max_episode_len", self.max_episode_len),
            ("eval.episodes", self.eval.episodes),
            ("eval.max_len", self.eval.max_len),
            ("eval.ttfv_episodes", self.eval.ttfv_episodes),
            ("eval.ttfv_max_steps", self.eval.ttfv_max_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.eval.novelty_eps > 0.0 && self.eval.novelty_eps < 1.0) {
            return Err(Error::Config("eval.novelty_eps must lie in (0, 1)".into()));
        }
        if !(self.eval.near_miss_margin > 0.0) {
            return Err(Error::Config("eval.near_miss_margin must be positive".into()));
        }
        match (&self.offline_path, &self.generate_offline) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "exactly one of offline_path and generate_offline must be given".into(),
            )),
        }
    }

    /// Copy with the learner's backup mode set by the variant.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.learner.backup_mode = c.variant.backup_mode();
        c
    }

    /// Sets the horizon everywhere it appears.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.total_steps = steps;
        if steps > 0 {
            self.dts.horizon = steps;
            self.dss.horizon = steps;
        }
    }
}

/// One line of the run log, written at every evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub step: u64,
    pub lambda: f64,
    pub delta: usize,
    pub td_error: Option<f64>,
    pub ensemble_variance: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    /// Cumulative executed violations.
    pub executed_violations: u64,
    pub pre_guard_violation_rate: Option<f64>,
    pub near_miss_rate: Option<f64>,
    pub eval_return: f64,
    pub eval_violations: u64,
    pub ttfv: f64,
    pub coverage: usize,
    pub visitation_entropy: Option<f64>,
    pub starved_targets: u64,
    pub online_fallbacks: u64,
    pub offline_fallbacks: u64,
    pub online_buffer_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub total_steps: u64,
    pub executed_violations: u64,
    pub hazard_entries: u64,
    /// Online appends whose executed action was unsafe.
    pub unsafe_online_records: u64,
    /// Mean over the last quarter of steps.
    pub final_td_error: Option<f64>,
    pub final_ensemble_variance: Option<f64>,
    pub eval_return: f64,
    pub eval_violations: u64,
    pub ttfv: f64,
    pub coverage: usize,
    pub visitation_entropy: Option<f64>,
    pub support_kl: Option<f64>,
    pub action_novelty_rate: f64,
    pub margin_scan_accuracy: Option<f64>,
    pub online_buffer_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IntervalRecord>,
    pub summary: RunSummary,
    /// Final learner state; not part of the JSON Lines log.
    #[serde(skip)]
    pub learner: Option<Learner>,
    #[serde(skip)]
    pub online: Vec<TransitionRecord>,
}

impl RunLog {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<IntervalRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Writes `log.jsonl` and `summary.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("log.jsonl"))?);
        self.write_jsonl(&mut log)?;
        log.flush()?;
        let mut summary = serde_json::to_string_pretty(&self.summary)?;
        summary.push('\n');
        std::fs::write(dir.join("summary.json"), summary)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub max_len: usize,
    pub guard_on: bool,
    pub stochastic: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub violations: u64,
    pub returns: Vec<f64>,
    pub visits: VisitationStats,
}

fn choose<R: Rng + ?Sized>(dist: &PolicyDistribution, stochastic: bool, rng: &mut R) -> usize {
    if stochastic {
        dist.sample_with(rng.random())
    } else {
        dist.argmax()
    }
}

fn act(spec: &SafetySpec, s: usize, a: usize, guard_on: bool) -> usize {
    if guard_on {
        project_action(spec, s, a).exec_action
    } else {
        a
    }
}

fn check_policy(pol: &[PolicyDistribution], mdp: &TabularMdp) -> Result<()> {
    if pol.len() != mdp.num_states() || pol.iter().any(|d| d.len() != mdp.num_actions()) {
        return Err(Error::Dimension("policy table does not match the MDP".into()));
    }
    Ok(())
}

/// Frozen-policy rollouts from the initial state; undiscounted returns.
pub fn evaluate_policy(
    pol: &[PolicyDistribution],
    mdp: &TabularMdp,
    spec: &SafetySpec,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if opts.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    check_policy(pol, mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut visits = VisitationStats::new(mdp.num_states(), mdp.num_actions());
    let mut returns = Vec::with_capacity(opts.episodes);
    let mut violations = 0;
    for _ in 0..opts.episodes {
        let mut s = mdp.initial_state();
        let mut ret = 0.0;
        for _ in 0..opts.max_len {
            if mdp.is_terminal(s) {
                break;
            }
            let a = act(spec, s, choose(&pol[s], opts.stochastic, &mut rng), opts.guard_on);
            visits.record(s, a);
            let out = env_step(mdp, s, a, &mut rng);
            if !spec.is_safe(s, a) || mdp.is_hazard(out.s_next) {
                violations += 1;
            }
            ret += out.r;
            s = out.s_next;
            if out.done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(EvalResult {
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        violations,
        returns,
        visits,
    })
}

/// Median over episodes of the 1-based step of the first violation, with
/// violation-free episodes censored at `max_len`.
pub fn measure_ttfv(
    pol: &[PolicyDistribution],
    mdp: &TabularMdp,
    spec: &SafetySpec,
    opts: &EvalOptions,
) -> Result<f64> {
    if opts.episodes == 0 || opts.max_len == 0 {
        return Err(Error::Config("TTFV needs positive episodes and max_steps".into()));
    }
    check_policy(pol, mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut firsts = Vec::with_capacity(opts.episodes);
    for _ in 0..opts.episodes {
        let mut s = mdp.initial_state();
        let mut first = opts.max_len;
        for k in 1..=opts.max_len {
            if mdp.is_terminal(s) {
                break;
            }
            let a = act(spec, s, choose(&pol[s], opts.stochastic, &mut rng), opts.guard_on);
            let out = env_step(mdp, s, a, &mut rng);
            if !spec.is_safe(s, a) || mdp.is_hazard(out.s_next) {
                first = k;
                break;
            }
            s = out.s_next;
        }
        firsts.push(first as f64);
    }
    Ok(median(&mut firsts))
}

/// Median, averaging the two middle values for even lengths. NaN for empty input.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Loads or generates the offline dataset named by the config.
pub fn load_offline(cfg: &RunConfig, mdp: &TabularMdp, spec: &SafetySpec) -> Result<OfflineDataset> {
    let data = match (&cfg.offline_path, &cfg.generate_offline) {
        (Some(path), None) => OfflineDataset::load(path)?,
        (None, Some(g)) => {
            let behavior = behavior_policy(g.behavior, mdp, spec)?;
            let collect = CollectConfig {
                n_episodes: g.n_episodes,
                max_ep_len: g.max_ep_len,
                guard: g.guard,
                seed: g.seed.unwrap_or_else(|| derive_seed(cfg.seed, OFFLINE_SALT)),
            };
            collect_offline_dataset(mdp, spec, &behavior, &collect)?
        }
        _ => {
            return Err(Error::Config(
                "exactly one of offline_path and generate_offline must be given".into(),
            ))
        }
    };
    data.check_bounds(mdp.num_states(), mdp.num_actions())?;
    Ok(data)
}

#[derive(Default)]
struct Interval {
    td: Vec<f64>,
    var: Vec<f64>,
    actor: Vec<f64>,
    critic: Vec<f64>,
    proposals: u64,
    pre_violations: u64,
    near_misses: u64,
}

struct Evaluator<'a> {
    cfg: &'a RunConfig,
    mdp: &'a TabularMdp,
    spec: &'a SafetySpec,
    guard_on: bool,
}

impl Evaluator<'_> {
    fn options(&self, salt: u64, index: u64, episodes: usize, max_len: usize) -> EvalOptions {
        EvalOptions {
            episodes,
            max_len,
            guard_on: self.guard_on,
            stochastic: self.cfg.eval.stochastic,
            seed: derive_seed(self.cfg.seed ^ salt, index),
        }
    }

    fn run(&self, pol: &[PolicyDistribution], index: u64) -> Result<(EvalResult, f64)> {
        let e = &self.cfg.eval;
        let eval = evaluate_policy(
            pol,
            self.mdp,
            self.spec,
            &self.options(EVAL_SALT, index, e.episodes, e.max_len),
        )?;
        let ttfv = measure_ttfv(
            pol,
            self.mdp,
            self.spec,
            &self.options(TTFV_SALT, index, e.ttfv_episodes, e.ttfv_max_steps),
        )?;
        Ok((eval, ttfv))
    }
}

/// Runs the full hybrid loop described by `cfg`. Deterministic given the config.
pub fn run_training(cfg: &RunConfig) -> Result<RunLog> {
    cfg.validate()?;
    let cfg = &cfg.normalized();
    let (mdp, spec) = cfg.env.build()?;
    spec.check_compatible(&mdp)?;
    if (cfg.learner.gamma - mdp.gamma()).abs() > 0.0 {
        return Err(Error::Config(format!(
            "learner gamma {} differs from the environment's {}",
            cfg.learner.gamma,
            mdp.gamma()
        )));
    }
    let offline = load_offline(cfg, &mdp, &spec)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner = Learner::new(cfg.learner.clone(), ns, na, &mut rng)?;
    let mut online = OnlineBuffer::new(cfg.online_buffer_capacity);
    let mut visits = VisitationStats::new(ns, na);
    let interacts = cfg.variant != Variant::OfflineOnly;
    let evaluator = Evaluator {
        cfg,
        mdp: &mdp,
        spec: &spec,
        guard_on: cfg.variant.projects(),
    };

    let (mut executed_violations, mut hazard_entries, mut unsafe_online) = (0u64, 0u64, 0u64);
    let (mut starved, mut on_fb, mut off_fb) = (0u64, 0u64, 0u64);
    let mut step_td = Vec::with_capacity(cfg.total_steps as usize);
    let mut step_var = Vec::with_capacity(cfg.total_steps as usize);
    let mut records = Vec::new();

    let (eval0, ttfv0) = evaluator.run(&learner.policy.distributions(), 0)?;
    records.push(IntervalRecord {
        step: 0,
        lambda: if interacts { dss_mixing(0, &cfg.dss) } else { 0.0 },
        delta: dts_interval(0, &cfg.dts),
        td_error: None,
        ensemble_variance: None,
        actor_loss: None,
        critic_loss: None,
        executed_violations: 0,
        pre_guard_violation_rate: None,
        near_miss_rate: None,
        eval_return: eval0.mean_return,
        eval_violations: eval0.violations,
        ttfv: ttfv0,
        coverage: 0,
        visitation_entropy: None,
        starved_targets: 0,
        online_fallbacks: 0,
        offline_fallbacks: 0,
        online_buffer_len: 0,
    });

    let mut s = mdp.initial_state();
    let (mut episode, mut t_in_ep) = (0u64, 0u64);
    let mut interval = Interval::default();
    let mut last_eval = (eval0, ttfv0);
    for t in 0..cfg.total_steps {
        if interacts {
            let a_prop = learner.policy.distribution(s).sample_with(rng.random());
            let a_exec = act(&spec, s, a_prop, cfg.variant.projects());
            let out = env_step(&mdp, s, a_exec, &mut rng);
            let unsafe_exec = !spec.is_safe(s, a_exec);
            if unsafe_exec || mdp.is_hazard(out.s_next) {
                executed_violations += 1;
            }
            hazard_entries += u64::from(mdp.is_hazard(out.s_next));
            unsafe_online += u64::from(unsafe_exec);
            interval.proposals += 1;
            if !spec.is_safe(s, a_prop) {
                interval.pre_violations += 1;
            } else if is_near_miss(&spec, s, a_prop, cfg.eval.near_miss_margin) {
                interval.near_misses += 1;
            }
            visits.record(s, a_exec);
            append_online(
                &mut online,
                TransitionRecord {
                    s,
                    a_exec,
                    r: out.r,
                    s_next: out.s_next,
                    done: out.done,
                    t: t_in_ep,
                    episode,
                    a_prop: Some(a_prop),
                },
            );
            t_in_ep += 1;
            if out.done || mdp.is_terminal(out.s_next) || t_in_ep as usize >= cfg.max_episode_len {
                s = mdp.initial_state();
                episode += 1;
                t_in_ep = 0;
            } else {
                s = out.s_next;
            }
        }

        let lambda = if interacts { dss_mixing(t, &cfg.dss) } else { 0.0 };
        let delta = dts_interval(t, &cfg.dts);
        let (mut td, mut var) = (0.0, 0.0);
        for _ in 0..cfg.updates_per_step {
            let batch = sample_hybrid_batch(&offline, &online, lambda, delta, cfg.batch_size, &mut rng)?;
            on_fb += batch.online_fallbacks as u64;
            off_fb += batch.offline_fallbacks as u64;
            let recs: Vec<TransitionRecord> = batch.samples.into_iter().map(|x| x.record).collect();
            let stats = learner.update(&recs, &spec, &mut rng)?;
            starved += stats.starved as u64;
            td += stats.td_error;
            var += stats.ensemble_variance;
            interval.td.push(stats.td_error);
            interval.var.push(stats.ensemble_variance);
            interval.actor.push(stats.actor_loss);
            interval.critic.push(stats.critic_loss);
        }
        step_td.push(td / cfg.updates_per_step as f64);
        step_var.push(var / cfg.updates_per_step as f64);

        let done_steps = t + 1;
        if done_steps % cfg.eval_every == 0 || done_steps == cfg.total_steps {
            let (eval, ttfv) = evaluator.run(&learner.policy.distributions(), done_steps)?;
            let rate = |k: u64| (interval.proposals > 0).then(|| k as f64 / interval.proposals as f64);
            records.push(IntervalRecord {
                step: done_steps,
                lambda,
                delta,
                td_error: mean(&interval.td),
                ensemble_variance: mean(&interval.var),
                actor_loss: mean(&interval.actor),
                critic_loss: mean(&interval.critic),
                executed_violations,
                pre_guard_violation_rate: rate(interval.pre_violations),
                near_miss_rate: rate(interval.near_misses),
                eval_return: eval.mean_return,
                eval_violations: eval.violations,
                ttfv,
                coverage: coverage_count(&visits),
                visitation_entropy: visitation_entropy(&visits).ok(),
                starved_targets: starved,
                online_fallbacks: on_fb,
                offline_fallbacks: off_fb,
                online_buffer_len: online.len(),
            });
            interval = Interval::default();
            last_eval = (eval, ttfv);
        }
    }

    let final_pol = learner.policy.distributions();
    let (eval, ttfv) = last_eval;
    let bc = derive_bc_policy(&offline, ns, na)?;
    let weights: Vec<f64> = eval.visits.weights().unwrap_or_default();
    let support = if weights.is_empty() {
        None
    } else {
        Some(support_kl(&final_pol, &bc, &weights)?)
    };
    let eval_states: Vec<usize> = (0..ns).filter(|&s| eval.visits.state_counts()[s] > 0).collect();
    let anr = action_novelty_rate(&final_pol, &bc, &eval_states, cfg.eval.novelty_eps)?;
    let margin = if spec.boundary_states().is_empty() {
        None
    } else {
        Some(margin_scan(&final_pol, &mdp, &spec, evaluator.guard_on)?)
    };
    let quartile = step_td.len() - step_td.len() * 3 / 4;
    let tail = |xs: &[f64]| mean(&xs[xs.len() - quartile..]);
    let summary = RunSummary {
        variant: cfg.variant,
        seed: cfg.seed,
        total_steps: cfg.total_steps,
        executed_violations,
        hazard_entries,
        unsafe_online_records: unsafe_online,
        final_td_error: tail(&step_td),
        final_ensemble_variance: tail(&step_var),
        eval_return: eval.mean_return,
        eval_violations: eval.violations,
        ttfv,
        coverage: coverage_count(&visits),
        visitation_entropy: visitation_entropy(&visits).ok(),
        support_kl: support,
        action_novelty_rate: anr,
        margin_scan_accuracy: margin,
        online_buffer_len: online.len(),
    };
    Ok(RunLog {
        records,
        summary,
        learner: Some(learner),
        online: online.iter().cloned().collect(),
    })
}
