//! Decoupled safe reinforcement learning on finite MDPs.
//!
//! A reward-seeking [`learner`] explores without constraints while the
//! [`guardian`] projects every executed action onto the safe action set and
//! supplies the safe-renormalized policy used in value backups. The
//! [`mdp`] module holds the exact guarded Bellman operator and solvers that
//! double as ground truth for everything else, [`sampling`] mixes offline and
//! online replay under two annealing schedules, and [`trainer`] runs the full
//! loop with its ablation variants. [`metrics`] covers the evaluation side.
//!
//! Data-parallel inner loops (Bellman sweeps, rollouts) run on rayon when the
//! `parallel` feature is enabled (the default) and fall back to plain
//! iterators otherwise. Results are identical either way.

pub mod envs;
pub mod error;
pub mod guardian;
pub mod learner;
pub mod mdp;
pub mod metrics;
pub mod par;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
