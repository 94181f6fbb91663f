//! Episodes, datasets and the demonstration/unlabeled split.
//!
//! States and actions are stored as `f32` (the on-disk precision) and widened
//! to `f64` whenever they are handed to the learning code.

mod format;
mod sample;
mod split;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub use format::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DATASET_MAGIC};
pub use sample::{
    early_states, sample_states, sample_states_keyed, sample_transitions, StateKey, StatePool,
    TransitionBatch, TransitionKey, TransitionSampler,
};
pub use split::{build_split, halve_unlabeled, SplitDataset, SuccessRule};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("episode {id} carries no ground-truth rewards")]
    MissingGroundTruth { id: u64 },
    #[error("no episode was selected as a demonstration")]
    EmptyDemoSet,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("source {0:?} has no transitions")]
    EmptySource(Source),
    #[error("malformed dataset file at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a sampled row came from, as seen by the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Expert,
    Unlabeled,
}

/// A sampling source inside a [`SplitDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Expert,
    HalfA,
    HalfB,
}

impl Source {
    pub fn origin(self) -> Origin {
        match self {
            Source::Expert => Origin::Expert,
            Source::HalfA | Source::HalfB => Origin::Unlabeled,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Source::Expert => "expert",
            Source::HalfA => "half_a",
            Source::HalfB => "half_b",
        };
        f.write_str(name)
    }
}

/// One logged episode: `T + 1` states, `T` actions, optionally `T` rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    id: u64,
    obs_dim: usize,
    act_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    gt_rewards: Option<Vec<f32>>,
}

impl Episode {
    /// Builds an episode from flat row-major state and action buffers.
    pub fn new(
        id: u64,
        obs_dim: usize,
        act_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        gt_rewards: Option<Vec<f32>>,
    ) -> Result<Self, DataError> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(DataError::Schema("obs_dim and act_dim must be positive".into()));
        }
        if actions.len() % act_dim != 0 || states.len() % obs_dim != 0 {
            return Err(DataError::Schema(format!("episode {id}: ragged buffers")));
        }
        let steps = actions.len() / act_dim;
        if states.len() / obs_dim != steps + 1 {
            return Err(DataError::Schema(format!(
                "episode {id}: {} states for {steps} actions",
                states.len() / obs_dim
            )));
        }
        if let Some(r) = &gt_rewards {
            if r.len() != steps {
                return Err(DataError::Schema(format!(
                    "episode {id}: {} rewards for {steps} actions",
                    r.len()
                )));
            }
        }
        if actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(DataError::Schema(format!("episode {id}: action outside [-1, 1]")));
        }
        Ok(Self { id, obs_dim, act_dim, states, actions, gt_rewards })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len() / self.act_dim
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// State `t` for `t` in `0..=T`.
    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn state_f64(&self, t: usize) -> Vec<f64> {
        self.state(t).iter().map(|&x| x as f64).collect()
    }

    pub fn action_f64(&self, t: usize) -> Vec<f64> {
        self.action(t).iter().map(|&x| x as f64).collect()
    }

    pub fn states_flat(&self) -> &[f32] {
        &self.states
    }

    pub fn actions_flat(&self) -> &[f32] {
        &self.actions
    }

    pub fn gt_rewards(&self) -> Option<&[f32]> {
        self.gt_rewards.as_deref()
    }

    /// Drops the hidden ground-truth rewards.
    pub fn stripped(mut self) -> Self {
        self.gt_rewards = None;
        self
    }
}

/// An ordered collection of episodes sharing observation and action sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    obs_dim: usize,
    act_dim: usize,
    episodes: Vec<Episode>,
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self { obs_dim, act_dim, episodes: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn from_episodes(
        obs_dim: usize,
        act_dim: usize,
        episodes: Vec<Episode>,
    ) -> Result<Self, DataError> {
        let mut d = Self::new(obs_dim, act_dim);
        for e in episodes {
            d.push(e)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, e: Episode) -> Result<(), DataError> {
        if e.obs_dim != self.obs_dim || e.act_dim != self.act_dim {
            return Err(DataError::Schema(format!(
                "episode {} has dims ({}, {}), dataset expects ({}, {})",
                e.id, e.obs_dim, e.act_dim, self.obs_dim, self.act_dim
            )));
        }
        self.episodes.push(e);
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn has_gt_rewards(&self) -> bool {
        !self.episodes.is_empty() && self.episodes.iter().all(|e| e.gt_rewards.is_some())
    }

    /// A copy holding only the episodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            episodes: indices.iter().map(|&i| self.episodes[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Per-coordinate standard deviation over every stored state.
    pub fn state_std(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.obs_dim];
        let mut sq = vec![0.0; self.obs_dim];
        let mut n = 0usize;
        for e in &self.episodes {
            for row in e.states.chunks_exact(self.obs_dim) {
                for (d, &x) in row.iter().enumerate() {
                    sum[d] += x as f64;
                    sq[d] += (x as f64) * (x as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return vec![0.0; self.obs_dim];
        }
        sum.iter()
            .zip(&sq)
            .map(|(s, q)| {
                let mean = s / n as f64;
                (q / n as f64 - mean * mean).max(0.0).sqrt()
            })
            .collect()
    }
}
