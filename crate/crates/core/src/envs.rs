//! Desk-scale environments with explicit safety rules.
//!
//! Grid coordinates are `(x, y)` with `y` growing upward; state id is
//! `y * width + x`. Goal and hazard cells are absorbing and terminal.

use crate::guardian::{project_action, PolicyDistribution};
use crate::mdp::{solve_guarded_value_iteration, SafetySpec, TabularMdp};
use crate::par;
use crate::sampling::{OfflineDataset, TransitionRecord};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const NOOP: usize = 4;
pub const NUM_GRID_ACTIONS: usize = 5;

/// Displacement of each grid action; doubles as its projection embedding.
pub const DISPLACEMENTS: [(i64, i64); NUM_GRID_ACTIONS] = [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)];

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    #[serde(default)]
    pub hazards: Vec<Cell>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    #[serde(default)]
    pub slip_prob: f64,
    pub gamma: f64,
}

/// Rewards and dynamics that accompany an ASCII map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub step_reward: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    #[serde(default)]
    pub slip_prob: f64,
    pub gamma: f64,
}

impl GridWorldSpec {
    /// Parses a map given top row first: `S` start, `G` goal, `X` hazard, `.` free.
    pub fn from_ascii(rows: &[impl AsRef<str>], params: GridParams) -> Result<Self> {
        let height = rows.len();
        if height == 0 {
            return Err(Error::Grid("empty map".into()));
        }
        let width = rows[0].as_ref().trim().chars().count();
        let (mut start, mut goal, mut hazards) = (None, None, Vec::new());
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref().trim();
            if row.chars().count() != width {
                return Err(Error::Grid(format!("row {i} has width {}, expected {width}", row.len())));
            }
            let y = height - 1 - i;
            for (x, c) in row.chars().enumerate() {
                match c {
                    'S' if start.is_none() => start = Some((x, y)),
                    'G' if goal.is_none() => goal = Some((x, y)),
                    'S' | 'G' => return Err(Error::Grid(format!("duplicate '{c}' in map"))),
                    'X' => hazards.push((x, y)),
                    '.' => {}
                    other => return Err(Error::Grid(format!("unknown map symbol '{other}'"))),
                }
            }
        }
        let spec = Self {
            width,
            height,
            start: start.ok_or_else(|| Error::Grid("map has no 'S'".into()))?,
            goal: goal.ok_or_else(|| Error::Grid("map has no 'G'".into()))?,
            hazards,
            step_reward: params.step_reward,
            goal_reward: params.goal_reward,
            hazard_reward: params.hazard_reward,
            slip_prob: params.slip_prob,
            gamma: params.gamma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width * self.height < 2 {
            return Err(Error::Grid(format!("degenerate {}x{} grid", self.width, self.height)));
        }
        let inside = |c: &Cell| c.0 < self.width && c.1 < self.height;
        if !inside(&self.start) || !inside(&self.goal) || !self.hazards.iter().all(inside) {
            return Err(Error::Grid("cell outside the grid".into()));
        }
        if self.start == self.goal {
            return Err(Error::Grid("start and goal coincide".into()));
        }
        if self.hazards.contains(&self.start) || self.hazards.contains(&self.goal) {
            return Err(Error::Grid("start or goal is a hazard".into()));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::Grid(format!("slip_prob must lie in [0, 1), got {}", self.slip_prob)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Gamma(self.gamma));
        }
        for r in [self.step_reward, self.goal_reward, self.hazard_reward] {
            if !r.is_finite() {
                return Err(Error::Grid("rewards must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, cell: Cell) -> usize {
        cell.1 * self.width + cell.0
    }

    pub fn cell(&self, s: usize) -> Cell {
        (s % self.width, s / self.width)
    }

    pub fn is_hazard(&self, cell: Cell) -> bool {
        self.hazards.contains(&cell)
    }

    pub fn is_terminal(&self, cell: Cell) -> bool {
        cell == self.goal || self.is_hazard(cell)
    }

    /// Intended successor of `a` from `cell`; moves into walls stay put.
    pub fn intended(&self, cell: Cell, a: usize) -> Cell {
        let (dx, dy) = DISPLACEMENTS[a];
        let x = cell.0 as i64 + dx;
        let y = cell.1 as i64 + dy;
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            cell
        } else {
            (x as usize, y as usize)
        }
    }

    fn entry_reward(&self, cell: Cell) -> f64 {
        if cell == self.goal {
            self.goal_reward
        } else if self.is_hazard(cell) {
            self.hazard_reward
        } else {
            self.step_reward
        }
    }
}

fn perpendicular(a: usize) -> [usize; 2] {
    match a {
        UP | DOWN => [LEFT, RIGHT],
        _ => [UP, DOWN],
    }
}

/// Builds the tabular MDP and safety predicate of a cliff-style grid.
///
/// A move slips to either perpendicular direction with probability
/// `slip_prob / 2` each; NOOP never slips. `g(s, a)` is false exactly when the
/// intended successor of a non-terminal cell is a hazard. `R(s, a)` is the
/// expected entry reward of the successor.
pub fn build_cliff_grid(spec: &GridWorldSpec) -> Result<(TabularMdp, SafetySpec)> {
    spec.validate()?;
    let n = spec.num_states();
    let mut p = vec![0.0; n * NUM_GRID_ACTIONS * n];
    let mut r = vec![0.0; n * NUM_GRID_ACTIONS];
    let mut safe = vec![vec![true; NUM_GRID_ACTIONS]; n];
    for s in 0..n {
        let cell = spec.cell(s);
        for a in 0..NUM_GRID_ACTIONS {
            let row = &mut p[(s * NUM_GRID_ACTIONS + a) * n..(s * NUM_GRID_ACTIONS + a + 1) * n];
            if spec.is_terminal(cell) {
                row[s] = 1.0;
                continue;
            }
            let main = spec.intended(cell, a);
            safe[s][a] = !spec.is_hazard(main);
            let mut outcomes = vec![(main, 1.0)];
            if a != NOOP && spec.slip_prob > 0.0 {
                outcomes[0].1 = 1.0 - spec.slip_prob;
                for b in perpendicular(a) {
                    outcomes.push((spec.intended(cell, b), spec.slip_prob / 2.0));
                }
            }
            for (c, w) in outcomes {
                row[spec.state(c)] += w;
                r[s * NUM_GRID_ACTIONS + a] += w * spec.entry_reward(c);
            }
        }
        if safe[s].iter().all(|ok| !ok) {
            return Err(Error::EmptySafeSet(s));
        }
    }
    let terminal: Vec<bool> = (0..n).map(|s| spec.is_terminal(spec.cell(s))).collect();
    let hazard: Vec<bool> = (0..n).map(|s| spec.is_hazard(spec.cell(s))).collect();
    let mdp = TabularMdp::from_flat(n, NUM_GRID_ACTIONS, p, r, spec.gamma)?
        .with_terminal(terminal)?
        .with_hazard(hazard)?
        .with_initial_state(spec.state(spec.start))?;
    let embedding = DISPLACEMENTS
        .iter()
        .map(|(dx, dy)| vec![*dx as f64, *dy as f64])
        .collect();
    Ok((mdp, SafetySpec::new(safe, embedding)?))
}

/// Random MDP with Dirichlet(1) transition rows, rewards in `[-1, 1]`, and
/// each action safe with probability `safe_fraction` (at least one per state).
pub fn build_random_safe_mdp(
    num_states: usize,
    num_actions: usize,
    safe_fraction: f64,
    gamma: f64,
    seed: u64,
) -> Result<(TabularMdp, SafetySpec)> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::Config("random MDP needs states and actions".into()));
    }
    if !(safe_fraction > 0.0 && safe_fraction <= 1.0) {
        return Err(Error::Config(format!("safe_fraction must lie in (0, 1], got {safe_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Vec::with_capacity(num_states * num_actions * num_states);
    let mut r = Vec::with_capacity(num_states * num_actions);
    for _ in 0..num_states * num_actions {
        let w: Vec<f64> = (0..num_states).map(|_| Exp1.sample(&mut rng)).collect();
        let z: f64 = w.iter().sum();
        p.extend(w.into_iter().map(|x: f64| x / z));
        r.push(rng.random_range(-1.0..=1.0));
    }
    let safe = (0..num_states)
        .map(|_| {
            let mut row: Vec<bool> = (0..num_actions)
                .map(|_| rng.random::<f64>() < safe_fraction)
                .collect();
            if !row.iter().any(|b| *b) {
                row[rng.random_range(0..num_actions)] = true;
            }
            row
        })
        .collect();
    let embedding = (0..num_actions)
        .map(|a| (0..num_actions).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
        .collect();
    let mdp = TabularMdp::from_flat(num_states, num_actions, p, r, gamma)?;
    Ok((mdp, SafetySpec::new(safe, embedding)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

/// Samples `s' ~ P(.|s,a)`; returns `R(s,a)` and whether `s'` is terminal.
pub fn env_step<R: Rng + ?Sized>(mdp: &TabularMdp, s: usize, a: usize, rng: &mut R) -> StepOutcome {
    let u: f64 = rng.random();
    let row = mdp.transition_row(s, a);
    let mut acc = 0.0;
    let mut s_next = None;
    let mut last = 0;
    for (i, p) in row.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            s_next = Some(i);
            break;
        }
    }
    let s_next = s_next.unwrap_or(last);
    StepOutcome {
        r: mdp.reward(s, a),
        s_next,
        done: mdp.is_terminal(s_next),
    }
}

/// Behavior policies for offline data generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Behavior {
    /// Uniform over all actions.
    Uniform,
    /// Uniform over each state's safe actions.
    UniformSafe,
    /// Greedy with respect to the guarded optimum, mixed with `epsilon` of
    /// uniform noise over all actions.
    EpsilonOptimal { epsilon: f64 },
}

pub fn behavior_policy(
    behavior: Behavior,
    mdp: &TabularMdp,
    spec: &SafetySpec,
) -> Result<Vec<PolicyDistribution>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    Ok(match behavior {
        Behavior::Uniform => vec![PolicyDistribution::uniform(na); ns],
        Behavior::UniformSafe => (0..ns)
            .map(|s| PolicyDistribution::uniform_over(na, spec.safe_actions(s)))
            .collect(),
        Behavior::EpsilonOptimal { epsilon } => {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
            }
            let q = solve_guarded_value_iteration(mdp, spec, 1e-9, 100_000)?.q;
            (0..ns)
                .map(|s| {
                    let mut best = spec.safe_actions(s)[0];
                    for &a in spec.safe_actions(s) {
                        if q.get(s, a) > q.get(s, best) {
                            best = a;
                        }
                    }
                    let mut p = vec![epsilon / na as f64; na];
                    p[best] += 1.0 - epsilon;
                    PolicyDistribution::new(p).expect("mixture is normalized")
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub n_episodes: usize,
    pub max_ep_len: usize,
    /// Project behavior actions onto the safe set before execution.
    #[serde(default = "yes")]
    pub guard: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// Rolls out `behavior` from the initial state. Each episode uses its own
/// seeded stream, so the result is identical with or without threads.
pub fn collect_offline_dataset(
    mdp: &TabularMdp,
    spec: &SafetySpec,
    behavior: &[PolicyDistribution],
    cfg: &CollectConfig,
) -> Result<OfflineDataset> {
    spec.check_compatible(mdp)?;
    if behavior.len() != mdp.num_states()
        || behavior.iter().any(|d| d.len() != mdp.num_actions())
    {
        return Err(Error::Dimension("behavior policy does not match the MDP".into()));
    }
    let episodes = par::map_indexed(cfg.n_episodes, |e| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(cfg.seed, e as u64));
        let mut s = mdp.initial_state();
        let mut out = Vec::new();
        for t in 0..cfg.max_ep_len {
            let a_prop = behavior[s].sample_with(rng.random());
            let a_exec = if cfg.guard {
                project_action(spec, s, a_prop).exec_action
            } else {
                a_prop
            };
            let step = env_step(mdp, s, a_exec, &mut rng);
            out.push(TransitionRecord {
                s,
                a_exec,
                r: step.r,
                s_next: step.s_next,
                done: step.done,
                t: t as u64,
                episode: e as u64,
                a_prop: Some(a_prop),
            });
            if step.done {
                break;
            }
            s = step.s_next;
        }
        out
    });
    OfflineDataset::from_episodes(episodes.into_iter().filter(|e| !e.is_empty()).collect())
}
