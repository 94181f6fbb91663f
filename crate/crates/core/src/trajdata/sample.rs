use rand::Rng;

use super::{DataError, Dataset, Origin, Source, SplitDataset};
use crate::rng::RngStream;

/// Cumulative counts over a list of entries, for uniform draws over their union.
#[derive(Debug, Clone)]
struct CumIndex {
    ends: Vec<usize>,
}

impl CumIndex {
    fn new(counts: impl Iterator<Item = usize>) -> Self {
        let mut total = 0;
        let ends = counts
            .map(|c| {
                total += c;
                total
            })
            .collect();
        Self { ends }
    }

    fn total(&self) -> usize {
        self.ends.last().copied().unwrap_or(0)
    }

    /// Maps a global position to `(entry, offset within entry)`.
    fn locate(&self, u: usize) -> (usize, usize) {
        let entry = self.ends.partition_point(|&end| end <= u);
        let start = if entry == 0 { 0 } else { self.ends[entry - 1] };
        (entry, u - start)
    }
}

/// Identifies one sampled state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateKey {
    pub source: Source,
    pub episode_id: u64,
    pub t: usize,
}

/// Identifies one sampled transition `(s_t, a_t, s_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransitionKey {
    pub source: Source,
    /// Index of the episode within its own dataset (demos or unlabeled).
    pub episode: usize,
    pub episode_id: u64,
    pub t: usize,
}

/// Parallel state/action/next-state rows, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub next_states: Vec<f64>,
    pub origin: Vec<Origin>,
    pub keys: Vec<TransitionKey>,
}

impl TransitionBatch {
    pub fn empty(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            origin: Vec::new(),
            keys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &TransitionBatch) {
        assert_eq!((self.obs_dim, self.act_dim), (other.obs_dim, other.act_dim));
        self.states.extend_from_slice(&other.states);
        self.actions.extend_from_slice(&other.actions);
        self.next_states.extend_from_slice(&other.next_states);
        self.origin.extend_from_slice(&other.origin);
        self.keys.extend_from_slice(&other.keys);
    }

    pub fn concat(parts: &[TransitionBatch]) -> Self {
        let mut out = TransitionBatch::empty(parts[0].obs_dim, parts[0].act_dim);
        for p in parts {
            out.extend(p);
        }
        out
    }
}

/// Uniform sampler over the transitions of a union of split sources.
#[derive(Debug, Clone)]
pub struct TransitionSampler {
    entries: Vec<(Source, usize)>,
    index: CumIndex,
}

impl TransitionSampler {
    pub fn new(split: &SplitDataset, sources: &[Source]) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        let mut counts = Vec::new();
        for &src in sources {
            let eps = split.source_episodes(src);
            let total: usize = eps.iter().map(|(_, e)| e.len()).sum();
            if total == 0 {
                return Err(DataError::EmptySource(src));
            }
            for (i, e) in eps {
                entries.push((src, i));
                counts.push(e.len());
            }
        }
        if entries.is_empty() {
            return Err(DataError::InvalidArgument("no sources requested".into()));
        }
        Ok(Self { entries, index: CumIndex::new(counts.into_iter()) })
    }

    pub fn total(&self) -> usize {
        self.index.total()
    }

    /// Row `u` of the union, in source-then-episode-then-time order.
    pub fn row(&self, split: &SplitDataset, u: usize) -> TransitionKey {
        let (entry, t) = self.index.locate(u);
        let (source, episode) = self.entries[entry];
        let e = match source {
            Source::Expert => &split.demos.episodes()[episode],
            _ => &split.unlabeled.episodes()[episode],
        };
        TransitionKey { source, episode, episode_id: e.id(), t }
    }

    pub fn sample(&self, split: &SplitDataset, n: usize, rng: &mut RngStream) -> TransitionBatch {
        let mut batch = TransitionBatch::empty(split.obs_dim(), split.act_dim());
        let total = self.total();
        for _ in 0..n {
            let key = self.row(split, rng.random_range(0..total));
            push_transition(&mut batch, split, key);
        }
        batch
    }

    /// Every transition of the union, in enumeration order.
    pub fn enumerate(&self, split: &SplitDataset) -> TransitionBatch {
        let mut batch = TransitionBatch::empty(split.obs_dim(), split.act_dim());
        for u in 0..self.total() {
            push_transition(&mut batch, split, self.row(split, u));
        }
        batch
    }
}

fn push_transition(batch: &mut TransitionBatch, split: &SplitDataset, key: TransitionKey) {
    let e = match key.source {
        Source::Expert => &split.demos.episodes()[key.episode],
        _ => &split.unlabeled.episodes()[key.episode],
    };
    batch.states.extend(e.state(key.t).iter().map(|&x| x as f64));
    batch.actions.extend(e.action(key.t).iter().map(|&x| x as f64));
    batch.next_states.extend(e.state(key.t + 1).iter().map(|&x| x as f64));
    batch.origin.push(key.source.origin());
    batch.keys.push(key);
}

/// Uniform transitions over the union of `sources`, with replacement.
pub fn sample_transitions(
    split: &SplitDataset,
    sources: &[Source],
    n: usize,
    rng: &mut RngStream,
) -> Result<TransitionBatch, DataError> {
    Ok(TransitionSampler::new(split, sources)?.sample(split, n, rng))
}

/// Uniform sampler over every stored state (`T + 1` per episode) of some split sources.
#[derive(Debug, Clone)]
pub struct StatePool {
    entries: Vec<(Source, usize)>,
    index: CumIndex,
}

impl StatePool {
    pub fn new(split: &SplitDataset, sources: &[Source]) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        let mut counts = Vec::new();
        for &src in sources {
            let eps = split.source_episodes(src);
            if eps.is_empty() {
                return Err(DataError::EmptySource(src));
            }
            for (i, e) in eps {
                entries.push((src, i));
                counts.push(e.len() + 1);
            }
        }
        if entries.is_empty() {
            return Err(DataError::InvalidArgument("no sources requested".into()));
        }
        Ok(Self { entries, index: CumIndex::new(counts.into_iter()) })
    }

    pub fn total(&self) -> usize {
        self.index.total()
    }

    pub fn sample(
        &self,
        split: &SplitDataset,
        n: usize,
        rng: &mut RngStream,
    ) -> (Vec<Vec<f64>>, Vec<StateKey>) {
        let total = self.total();
        let mut states = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(n);
        for _ in 0..n {
            let (entry, t) = self.index.locate(rng.random_range(0..total));
            let (source, i) = self.entries[entry];
            let e = match source {
                Source::Expert => &split.demos.episodes()[i],
                _ => &split.unlabeled.episodes()[i],
            };
            states.push(e.state_f64(t));
            keys.push(StateKey { source, episode_id: e.id(), t });
        }
        (states, keys)
    }
}

/// `n` states drawn uniformly (with replacement) from all states of `d`.
pub fn sample_states(
    d: &Dataset,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>, DataError> {
    Ok(sample_states_keyed(d, n, rng)?.into_iter().map(|(s, _)| s).collect())
}

/// Like [`sample_states`], also returning `(episode index, t)` per draw.
pub fn sample_states_keyed(
    d: &Dataset,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<(Vec<f64>, (usize, usize))>, DataError> {
    if d.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if n == 0 {
        return Err(DataError::InvalidArgument("sample size must be at least 1".into()));
    }
    let index = CumIndex::new(d.episodes().iter().map(|e| e.len() + 1));
    let total = index.total();
    Ok((0..n)
        .map(|_| {
            let (ep, t) = index.locate(rng.random_range(0..total));
            (d.episodes()[ep].state_f64(t), (ep, t))
        })
        .collect())
}

/// The first `min(k, T + 1)` observations of every episode, concatenated.
pub fn early_states(d: &Dataset, k: usize) -> Vec<Vec<f64>> {
    d.episodes()
        .iter()
        .flat_map(|e| (0..k.min(e.len() + 1)).map(move |t| e.state_f64(t)))
        .collect()
}
