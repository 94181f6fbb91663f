use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Dataset, Episode, Source};
use crate::rng::{self, tags, RngStream};

/// How a raw episode qualifies as a candidate demonstration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SuccessRule {
    /// The top `q` fraction of episodes by ground-truth return.
    TopQuantile(f64),
    /// At least this fraction of steps issued reward 1.
    StepFraction(f64),
}

impl SuccessRule {
    /// Indices (ascending) of the qualifying episodes.
    pub fn successful(&self, raw: &Dataset) -> Result<Vec<usize>, DataError> {
        let rewards: Vec<&[f32]> = raw
            .episodes()
            .iter()
            .map(|e| e.gt_rewards().ok_or(DataError::MissingGroundTruth { id: e.id() }))
            .collect::<Result<_, _>>()?;
        match *self {
            SuccessRule::TopQuantile(q) => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(DataError::InvalidArgument(format!("quantile {q} outside [0, 1]")));
                }
                let returns: Vec<f64> =
                    rewards.iter().map(|r| r.iter().map(|&x| x as f64).sum()).collect();
                let take = (q * raw.len() as f64).ceil() as usize;
                let mut order: Vec<usize> = (0..raw.len()).collect();
                // Stable: equal returns keep ascending episode order.
                order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]));
                let mut chosen: Vec<usize> = order.into_iter().take(take).collect();
                chosen.sort_unstable();
                Ok(chosen)
            }
            SuccessRule::StepFraction(threshold) => Ok(rewards
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    let hits = r.iter().filter(|&&x| x >= 1.0).count();
                    !r.is_empty() && hits as f64 >= threshold * r.len() as f64
                })
                .map(|(i, _)| i)
                .collect()),
        }
    }
}

/// The demonstration set, the unlabeled set, and the halving of the latter.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub demos: Dataset,
    pub unlabeled: Dataset,
    pub unlabeled_half_a: Vec<usize>,
    pub unlabeled_half_b: Vec<usize>,
}

impl SplitDataset {
    /// Assembles a split, halving `unlabeled` with `seed`.
    pub fn from_parts(demos: Dataset, unlabeled: Dataset, seed: u64) -> Result<Self, DataError> {
        let mut rng = rng::stream(seed, tags::HALVE);
        Self::with_rng(demos, unlabeled, &mut rng)
    }

    fn with_rng(demos: Dataset, unlabeled: Dataset, rng: &mut RngStream) -> Result<Self, DataError> {
        if demos.obs_dim() != unlabeled.obs_dim() || demos.act_dim() != unlabeled.act_dim() {
            return Err(DataError::Schema("demos and unlabeled dims differ".into()));
        }
        let demo_ids: HashSet<u64> = demos.episodes().iter().map(Episode::id).collect();
        if let Some(e) = unlabeled.episodes().iter().find(|e| demo_ids.contains(&e.id())) {
            return Err(DataError::Schema(format!("episode {} is in both sets", e.id())));
        }
        let (half_a, half_b) = if unlabeled.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            halve_indices(unlabeled.len(), rng)
        };
        Ok(Self { demos, unlabeled, unlabeled_half_a: half_a, unlabeled_half_b: half_b })
    }

    /// Episodes belonging to `source`, each with its index in its own dataset.
    pub fn source_episodes(&self, source: Source) -> Vec<(usize, &Episode)> {
        match source {
            Source::Expert => self.demos.episodes().iter().enumerate().collect(),
            Source::HalfA => {
                self.unlabeled_half_a.iter().map(|&i| (i, &self.unlabeled.episodes()[i])).collect()
            }
            Source::HalfB => {
                self.unlabeled_half_b.iter().map(|&i| (i, &self.unlabeled.episodes()[i])).collect()
            }
        }
    }

    pub fn source_of_id(&self, id: u64) -> Option<Source> {
        if self.demos.episodes().iter().any(|e| e.id() == id) {
            return Some(Source::Expert);
        }
        let pos = self.unlabeled.episodes().iter().position(|e| e.id() == id)?;
        if self.unlabeled_half_a.contains(&pos) {
            Some(Source::HalfA)
        } else {
            Some(Source::HalfB)
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.demos.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.demos.act_dim()
    }
}

/// Splits a raw (reward-carrying) dataset into demonstrations and unlabeled data.
///
/// Each episode satisfying `rule` joins the demonstrations independently with
/// probability `inclusion_prob`; everything else is unlabeled. Rewards are
/// stripped from both outputs.
pub fn build_split(
    raw: &Dataset,
    rule: SuccessRule,
    inclusion_prob: f64,
    seed: u64,
) -> Result<SplitDataset, DataError> {
    if !(inclusion_prob > 0.0 && inclusion_prob <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "inclusion probability {inclusion_prob} outside (0, 1]"
        )));
    }
    let positives = rule.successful(raw)?;
    let mut rng = rng::stream(seed, tags::SPLIT);
    let mut is_demo = vec![false; raw.len()];
    for &i in &positives {
        // One draw per positive, in index order.
        is_demo[i] = rng.random::<f64>() < inclusion_prob;
    }
    let mut demos = Dataset::new(raw.obs_dim(), raw.act_dim());
    let mut unlabeled = Dataset::new(raw.obs_dim(), raw.act_dim());
    demos.meta = raw.meta.clone();
    unlabeled.meta = raw.meta.clone();
    for (e, demo) in raw.episodes().iter().zip(is_demo) {
        let target = if demo { &mut demos } else { &mut unlabeled };
        target.push(e.clone().stripped())?;
    }
    if demos.is_empty() {
        return Err(DataError::EmptyDemoSet);
    }
    SplitDataset::with_rng(demos, unlabeled, &mut rng)
}

/// Uniformly random halving of `d`'s episode indices into sizes `ceil(n/2)` and `floor(n/2)`.
pub fn halve_unlabeled(d: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if d.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = rng::stream(seed, tags::HALVE);
    Ok(halve_indices(d.len(), &mut rng))
}

fn halve_indices(n: usize, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut b = idx.split_off(n.div_ceil(2));
    let mut a = idx;
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}
