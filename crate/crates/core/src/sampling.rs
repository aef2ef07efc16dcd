//! Hybrid offline/online replay.
//!
//! Each minibatch slot is drawn from the online buffer with probability
//! `lambda` and from the offline dataset otherwise. Within the chosen source a
//! window anchor is drawn uniformly and the transition is drawn uniformly from
//! the contiguous intra-episode window of length `delta` that starts there.
//! `lambda` follows a logistic annealing schedule ([`dss_mixing`]) and `delta`
//! a power-law widening schedule ([`dts_interval`]).

use crate::guardian::PolicyDistribution;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

/// Additive smoothing used by [`derive_bc_policy`].
pub const BC_SMOOTHING: f64 = 0.01;

/// One environment transition. `a_exec` is the executed (post-projection)
/// action; `a_prop` is the learner's proposal when it was recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: usize,
    #[serde(rename = "a")]
    pub a_exec: usize,
    pub r: f64,
    #[serde(rename = "s2")]
    pub s_next: usize,
    pub done: bool,
    pub t: u64,
    #[serde(rename = "ep")]
    pub episode: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_prop: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransition {
    pub record: TransitionRecord,
    pub source: Source,
}

/// A minibatch plus provenance accounting.
#[derive(Debug, Clone, Default)]
pub struct HybridBatch {
    pub samples: Vec<SampledTransition>,
    /// Slots that chose the online buffer but were served offline because it was empty.
    pub online_fallbacks: usize,
    /// Slots that chose the offline dataset but were served online because it was empty.
    pub offline_fallbacks: usize,
}

impl HybridBatch {
    pub fn online_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let n = self.samples.iter().filter(|s| s.source == Source::Online).count();
        n as f64 / self.samples.len() as f64
    }

    pub fn records(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.samples.iter().map(|s| &s.record)
    }
}

/// The static offline dataset, grouped into episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OfflineDataset {
    episodes: Vec<Vec<TransitionRecord>>,
    /// `(episode index, position)` for every record.
    index: Vec<(usize, usize)>,
}

impl OfflineDataset {
    /// Groups records by episode id (in order of first appearance) and checks
    /// that steps are consecutive and successive records chain unless `done`.
    pub fn from_records(records: Vec<TransitionRecord>) -> Result<Self> {
        let mut episodes: Vec<Vec<TransitionRecord>> = Vec::new();
        let mut slot: std::collections::HashMap<u64, usize> = Default::default();
        for r in records {
            let i = *slot.entry(r.episode).or_insert_with(|| {
                episodes.push(Vec::new());
                episodes.len() - 1
            });
            episodes[i].push(r);
        }
        Self::from_episodes(episodes)
    }

    pub fn from_episodes(episodes: Vec<Vec<TransitionRecord>>) -> Result<Self> {
        let mut index = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            for (k, pair) in ep.windows(2).enumerate() {
                let (a, b) = (&pair[0], &pair[1]);
                if a.episode != b.episode {
                    return Err(Error::Dataset(format!(
                        "episode {} mixes ids {} and {}",
                        e, a.episode, b.episode
                    )));
                }
                if b.t != a.t + 1 {
                    return Err(Error::Dataset(format!(
                        "episode {}: step {} follows step {}",
                        a.episode, b.t, a.t
                    )));
                }
                if a.done {
                    return Err(Error::Dataset(format!(
                        "episode {}: record {} continues after done",
                        a.episode,
                        k + 1
                    )));
                }
                if a.s_next != b.s {
                    return Err(Error::Dataset(format!(
                        "episode {} step {}: s2={} but next record starts at s={}",
                        a.episode, a.t, a.s_next, b.s
                    )));
                }
            }
            index.extend((0..ep.len()).map(|k| (e, k)));
        }
        Ok(Self { episodes, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn episodes(&self) -> &[Vec<TransitionRecord>] {
        &self.episodes
    }

    pub fn get(&self, i: usize) -> &TransitionRecord {
        let (e, k) = self.index[i];
        &self.episodes[e][k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.episodes.iter().flatten()
    }

    /// Checks every state and action id against the given table sizes.
    pub fn check_bounds(&self, num_states: usize, num_actions: usize) -> Result<()> {
        for r in self.iter() {
            if r.s >= num_states || r.s_next >= num_states || r.a_exec >= num_actions {
                return Err(Error::Dataset(format!(
                    "record {r:?} out of range for {num_states} states / {num_actions} actions"
                )));
            }
            if r.a_prop.is_some_and(|a| a >= num_actions) {
                return Err(Error::Dataset(format!("proposed action out of range in {r:?}")));
            }
        }
        Ok(())
    }

    fn sample_window<R: Rng + ?Sized>(&self, delta: usize, rng: &mut R) -> &TransitionRecord {
        let (e, k) = self.index[rng.random_range(0..self.index.len())];
        let ep = &self.episodes[e];
        let span = delta.min(ep.len() - k);
        &ep[k + rng.random_range(0..span)]
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TransitionRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Self::from_records(records)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for r in self.iter() {
            serde_json::to_writer(&mut writer, r)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Fixed-capacity FIFO ring of online transitions.
#[derive(Debug, Clone)]
pub struct OnlineBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "online buffer capacity must be positive");
        Self {
            records: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    fn sample_window<R: Rng + ?Sized>(&self, delta: usize, rng: &mut R) -> &TransitionRecord {
        let k = rng.random_range(0..self.records.len());
        let ep = self.records[k].episode;
        let mut span = 1;
        while span < delta {
            let prev = &self.records[k + span - 1];
            match self.records.get(k + span) {
                Some(next) if !prev.done && next.episode == ep => span += 1,
                _ => break,
            }
        }
        &self.records[k + rng.random_range(0..span)]
    }
}

/// Appends `tr`, evicting the oldest record when full.
pub fn append_online(on: &mut OnlineBuffer, tr: TransitionRecord) {
    if on.records.len() == on.capacity {
        on.records.pop_front();
    }
    on.records.push_back(tr);
}

/// Temporal curriculum: `Delta(t) = Delta_min + (Delta_max - Delta_min) (t/T)^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtsConfig {
    pub delta_min: usize,
    pub delta_max: usize,
    pub beta: f64,
    pub horizon: u64,
}

impl DtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_min == 0 || self.delta_min > self.delta_max {
            return Err(Error::Config(format!(
                "DTS needs 0 < delta_min <= delta_max, got {} and {}",
                self.delta_min, self.delta_max
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("DTS beta must be positive, got {}", self.beta)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("DTS horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Mixing schedule: `lambda(t) = lambda_min + (lambda_max - lambda_min) sigma(k (t - T/2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DssConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub k: f64,
    pub horizon: u64,
}

impl DssConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda_min)
            && (0.0..=1.0).contains(&self.lambda_max)
            && self.lambda_min <= self.lambda_max;
        if !ok {
            return Err(Error::Config(format!(
                "DSS needs 0 <= lambda_min <= lambda_max <= 1, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::Config(format!("DSS k must be positive, got {}", self.k)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("DSS horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Sampling window length at step `t`. Steps past the horizon clamp to `delta_max`.
pub fn dts_interval(t: u64, cfg: &DtsConfig) -> usize {
    let frac = (t.min(cfg.horizon) as f64 / cfg.horizon as f64).powf(cfg.beta);
    let raw = cfg.delta_min as f64 + (cfg.delta_max - cfg.delta_min) as f64 * frac;
    (raw.round() as usize).clamp(cfg.delta_min, cfg.delta_max)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Online-data mixing weight at step `t`.
pub fn dss_mixing(t: u64, cfg: &DssConfig) -> f64 {
    let x = cfg.k * (t as f64 - cfg.horizon as f64 / 2.0);
    cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * logistic(x)
}

/// Draws `batch_size` transitions; see the module docs for the procedure.
pub fn sample_hybrid_batch<R: Rng + ?Sized>(
    off: &OfflineDataset,
    on: &OnlineBuffer,
    lambda: f64,
    delta: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<HybridBatch> {
    if off.is_empty() && on.is_empty() {
        return Err(Error::EmptySources);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let delta = delta.max(1);
    let mut batch = HybridBatch {
        samples: Vec::with_capacity(batch_size),
        ..Default::default()
    };
    for _ in 0..batch_size {
        let wants_online = rng.random::<f64>() < lambda;
        let source = match (wants_online, on.is_empty(), off.is_empty()) {
            (true, false, _) => Source::Online,
            (true, true, _) => {
                batch.online_fallbacks += 1;
                Source::Offline
            }
            (false, _, false) => Source::Offline,
            (false, _, true) => {
                batch.offline_fallbacks += 1;
                Source::Online
            }
        };
        let record = match source {
            Source::Online => on.sample_window(delta, rng),
            Source::Offline => off.sample_window(delta, rng),
        };
        batch.samples.push(SampledTransition {
            record: record.clone(),
            source,
        });
    }
    Ok(batch)
}

/// Smoothed behavior-cloning policy:
/// `pi_BC(a|s) = (n(s,a) + eps) / (n(s) + |A| eps)`, uniform where unvisited.
pub fn derive_bc_policy(
    off: &OfflineDataset,
    num_states: usize,
    num_actions: usize,
) -> Result<Vec<PolicyDistribution>> {
    if off.is_empty() {
        return Err(Error::Dataset("cannot clone a policy from an empty dataset".into()));
    }
    off.check_bounds(num_states, num_actions)?;
    let mut counts = vec![vec![0u64; num_actions]; num_states];
    for r in off.iter() {
        counts[r.s][r.a_exec] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return PolicyDistribution::uniform(num_actions);
            }
            let z = total as f64 + num_actions as f64 * BC_SMOOTHING;
            let probs = row.iter().map(|&c| (c as f64 + BC_SMOOTHING) / z).collect();
            PolicyDistribution::new(probs).expect("smoothed counts normalize")
        })
        .collect())
}
