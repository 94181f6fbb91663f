//! Reward learning from demonstrations versus unlabeled experience.
//!
//! A sigmoid-headed network `R(s)` over states is trained to score
//! demonstration states high and unlabeled states low, with three loss
//! variants: plain cross-entropy, the positive-unlabeled rewrite (which
//! estimates the negative-class term from unlabeled and positive data), and
//! the TRAIL reversed loss on early-episode constraint sets. Inputs are
//! perturbed with Gaussian noise during training, and the unlabeled data seen
//! by the reward model is restricted to one half of the unlabeled split.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diffcore::{
    sigmoid, AdamConfig, AdamState, Approximator, DiffError, Head, Tape, TargetCopy,
};
use crate::rng::RngStream;
use crate::trajdata::{
    early_states, DataError, Dataset, Origin, Source, SplitDataset, StateKey, StatePool,
    TransitionBatch,
};

/// Floor inside every `-log` term.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("constraint set is empty")]
    EmptyConstraintSet,
    #[error("reward model has no training data attached")]
    Detached,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardMode {
    /// Plain cross-entropy between expert and unlabeled states.
    Bce,
    /// Positive-unlabeled risk with class prior `eta`; `nonneg` clamps the
    /// estimated negative-class term at zero.
    Pu { eta: f64, nonneg: bool },
    /// Cross-entropy plus the reversed loss on the first `k` states of each episode.
    Trail { k: usize },
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardMode::Bce => write!(f, "bce"),
            RewardMode::Pu { eta, nonneg } => write!(f, "pu:{eta}:{}", u8::from(*nonneg)),
            RewardMode::Trail { k } => write!(f, "trail:{k}"),
        }
    }
}

impl FromStr for RewardMode {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RewardError::Config(format!("bad reward mode {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["bce"] => Ok(RewardMode::Bce),
            ["pu", eta, nn] => Ok(RewardMode::Pu { eta: eta.parse().map_err(|_| bad())?, nonneg: *nn == "1" }),
            ["trail", k] => Ok(RewardMode::Trail { k: k.parse().map_err(|_| bad())? }),
            _ => Err(bad()),
        }
    }
}

/// Value of a loss and its gradient with respect to the reward parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Early-episode states of the demonstrations and of the unlabeled data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSets {
    pub expert_early: Vec<Vec<f64>>,
    pub unlabeled_early: Vec<Vec<f64>>,
}

impl ConstraintSets {
    /// The first `k` observations of every demonstration and every half-A episode.
    pub fn from_split(split: &SplitDataset, k: usize) -> Self {
        let half_a = split.unlabeled.subset(&split.unlabeled_half_a);
        Self { expert_early: early_states(&split.demos, k), unlabeled_early: early_states(&half_a, k) }
    }
}

fn neg_log(z: f64) -> (f64, f64) {
    // -ln R and its derivative in the logit
    let r = sigmoid(z);
    if r > LOG_FLOOR {
        (-r.ln(), -sigmoid(-z))
    } else {
        (-LOG_FLOOR.ln(), 0.0)
    }
}

fn neg_log1m(z: f64) -> (f64, f64) {
    // -ln(1 - R), with 1 - R computed as sigmoid(-z)
    let q = sigmoid(-z);
    if q > LOG_FLOOR {
        (-q.ln(), sigmoid(z))
    } else {
        (-LOG_FLOOR.ln(), 0.0)
    }
}

fn logit(net: &Approximator, s: &[f64], tape: &mut Tape) -> f64 {
    net.forward_raw(s, tape).expect("state dimension");
    tape.out[0]
}

fn mean_prediction(net: &Approximator, states: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::default();
    states.iter().map(|s| sigmoid(logit(net, s, &mut tape))).sum::<f64>() / states.len() as f64
}

/// Adds `Σ_s a·(-ln R(s)) + b·(-ln(1 - R(s)))` over `states` to the running value and gradient.
fn accumulate(net: &Approximator, states: &[Vec<f64>], a: f64, b: f64, grad: &mut [f64]) -> f64 {
    let mut tape = Tape::default();
    let mut total = 0.0;
    for s in states {
        let z = logit(net, s, &mut tape);
        let (vp, dp) = neg_log(z);
        let (vn, dn) = neg_log1m(z);
        total += a * vp + b * vn;
        let dz = a * dp + b * dn;
        if dz != 0.0 {
            net.backward_raw(&mut tape, &[dz], grad, None).expect("shapes");
        }
    }
    total
}

fn check_nonempty(expert: &[Vec<f64>], unlabeled: &[Vec<f64>]) {
    assert!(!expert.is_empty() && !unlabeled.is_empty(), "reward batches must be nonempty");
}

/// `E_E[-ln R] + E_U[-ln(1 - R)]`.
pub fn loss_bce(net: &Approximator, expert: &[Vec<f64>], unlabeled: &[Vec<f64>]) -> LossGrad {
    check_nonempty(expert, unlabeled);
    let mut grad = vec![0.0; net.param_count()];
    let value = accumulate(net, expert, 1.0 / expert.len() as f64, 0.0, &mut grad)
        + accumulate(net, unlabeled, 0.0, 1.0 / unlabeled.len() as f64, &mut grad);
    LossGrad { value, grad }
}

/// `η E_E[-ln R] + E_U[-ln(1 - R)] - η E_E[-ln(1 - R)]`; with `nonneg`, the
/// last two terms together are clamped at zero (and contribute no gradient there).
pub fn loss_pu(
    net: &Approximator,
    expert: &[Vec<f64>],
    unlabeled: &[Vec<f64>],
    eta: f64,
    nonneg: bool,
) -> LossGrad {
    check_nonempty(expert, unlabeled);
    let ne = expert.len() as f64;
    let nu = unlabeled.len() as f64;
    let mut grad = vec![0.0; net.param_count()];
    if nonneg {
        let mut scratch = vec![0.0; net.param_count()];
        let negative_term = accumulate(net, unlabeled, 0.0, 1.0 / nu, &mut scratch)
            + accumulate(net, expert, 0.0, -eta / ne, &mut scratch);
        let positive_term = accumulate(net, expert, eta / ne, 0.0, &mut grad);
        if negative_term >= 0.0 {
            grad.iter_mut().zip(&scratch).for_each(|(g, s)| *g += s);
            return LossGrad { value: positive_term + negative_term, grad };
        }
        return LossGrad { value: positive_term, grad };
    }
    let value = accumulate(net, expert, eta / ne, -eta / ne, &mut grad)
        + accumulate(net, unlabeled, 0.0, 1.0 / nu, &mut grad);
    LossGrad { value, grad }
}

/// TRAIL loss and whether the reversed term was active.
#[derive(Debug, Clone, PartialEq)]
pub struct TrailLoss {
    pub loss: LossGrad,
    pub active: bool,
}

/// Cross-entropy on the main batches minus cross-entropy on the constraint
/// sets, the latter only while the mean prediction on expert early states
/// strictly exceeds the mean prediction on unlabeled early states.
pub fn loss_trail(
    net: &Approximator,
    expert: &[Vec<f64>],
    unlabeled: &[Vec<f64>],
    cs: &ConstraintSets,
) -> Result<TrailLoss, RewardError> {
    if cs.expert_early.is_empty() || cs.unlabeled_early.is_empty() {
        return Err(RewardError::EmptyConstraintSet);
    }
    let mut loss = loss_bce(net, expert, unlabeled);
    let active = mean_prediction(net, &cs.expert_early) > mean_prediction(net, &cs.unlabeled_early);
    if active {
        let reversed = loss_bce(net, &cs.expert_early, &cs.unlabeled_early);
        loss.value -= reversed.value;
        loss.grad.iter_mut().zip(&reversed.grad).for_each(|(g, r)| *g -= r);
    }
    Ok(TrailLoss { loss, active })
}

/// `s + N(0, scale²)` per coordinate; `scale = 0` is the identity.
pub fn augment_state(s: &[f64], scale: f64, rng: &mut RngStream) -> Vec<f64> {
    if scale == 0.0 {
        return s.to_vec();
    }
    s.iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + scale * z
        })
        .collect()
}

/// Per-coordinate variant of [`augment_state`].
pub fn augment_state_scaled(s: &[f64], scales: &[f64], rng: &mut RngStream) -> Vec<f64> {
    s.iter()
        .zip(scales)
        .map(|(&x, &sd)| {
            if sd == 0.0 {
                x
            } else {
                let z: f64 = StandardNormal.sample(rng);
                x + sd * z
            }
        })
        .collect()
}

/// Hard labels: 1 for demonstration rows, 0 for unlabeled rows.
pub fn flat_reward(origin: Origin) -> f64 {
    match origin {
        Origin::Expert => 1.0,
        Origin::Unlabeled => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Augmentation noise, as a fraction of each state coordinate's standard deviation.
    pub augment_scale: f64,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub adam: AdamConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::Pu { eta: 0.5, nonneg: false },
            augment_scale: 0.01,
            hidden: vec![64, 64],
            layer_norm: true,
            adam: AdamConfig::default(),
        }
    }
}

/// Sampling state prepared from a split: demonstrations and half A only.
#[derive(Debug, Clone)]
struct RewardData {
    expert: StatePool,
    unlabeled: StatePool,
    constraints: Option<ConstraintSets>,
    noise_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RewardModel {
    pub net: Approximator,
    pub target: TargetCopy,
    pub cfg: RewardConfig,
    opt: AdamState,
    data: Option<RewardData>,
}

/// Outcome of one reward update.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardStep {
    pub loss: f64,
    /// Every state drawn for this update (expert then unlabeled).
    pub consumed: Vec<StateKey>,
    pub trail_active: Option<bool>,
}

impl RewardModel {
    pub fn new(obs_dim: usize, cfg: RewardConfig, rng: &mut RngStream) -> Self {
        let net = Approximator::new(obs_dim, &cfg.hidden, cfg.layer_norm, Head::Sigmoid, 0.1, rng);
        let target = TargetCopy::of(&net);
        let opt = AdamState::new(net.param_count());
        Self { net, target, cfg, opt, data: None }
    }

    /// Rebuilds a model around trained parameters (the target copy is synced to them).
    pub fn from_net(net: Approximator, cfg: RewardConfig) -> Self {
        let target = TargetCopy::of(&net);
        let opt = AdamState::new(net.param_count());
        Self { net, target, cfg, opt, data: None }
    }

    /// Prepares sampling pools, constraint sets and augmentation scales from `split`.
    pub fn attach(&mut self, split: &SplitDataset) -> Result<(), RewardError> {
        let expert = StatePool::new(split, &[Source::Expert])?;
        let unlabeled = StatePool::new(split, &[Source::HalfA])?;
        let constraints = match self.cfg.mode {
            RewardMode::Trail { k } => {
                let cs = ConstraintSets::from_split(split, k);
                if cs.expert_early.is_empty() || cs.unlabeled_early.is_empty() {
                    return Err(RewardError::EmptyConstraintSet);
                }
                Some(cs)
            }
            _ => None,
        };
        let mut seen = split.demos.clone();
        for &i in &split.unlabeled_half_a {
            seen.push(split.unlabeled.episodes()[i].clone())?;
        }
        let noise_std = seen.state_std().iter().map(|sd| sd * self.cfg.augment_scale).collect();
        self.data = Some(RewardData { expert, unlabeled, constraints, noise_std });
        Ok(())
    }

    /// Online prediction `R_ψ(s)`.
    pub fn predict(&self, s: &[f64]) -> f64 {
        sigmoid(logit(&self.net, s, &mut Tape::default()))
    }

    /// Frozen-target prediction `R_ψ'(s)`.
    pub fn predict_target(&self, s: &[f64]) -> f64 {
        sigmoid(logit(self.target.net(), s, &mut Tape::default()))
    }

    pub fn sync_target(&mut self) {
        self.target.sync(&self.net);
    }

    /// The configured loss on the given (already augmented) batches.
    pub fn loss(
        &self,
        expert: &[Vec<f64>],
        unlabeled: &[Vec<f64>],
        constraints: Option<&ConstraintSets>,
    ) -> Result<(LossGrad, Option<bool>), RewardError> {
        Ok(match self.cfg.mode {
            RewardMode::Bce => (loss_bce(&self.net, expert, unlabeled), None),
            RewardMode::Pu { eta, nonneg } => (loss_pu(&self.net, expert, unlabeled, eta, nonneg), None),
            RewardMode::Trail { .. } => {
                let cs = constraints.ok_or(RewardError::EmptyConstraintSet)?;
                let t = loss_trail(&self.net, expert, unlabeled, cs)?;
                (t.loss, Some(t.active))
            }
        })
    }

    /// One optimizer step on a precomputed gradient.
    pub fn apply(&mut self, grad: &[f64]) -> Result<(), RewardError> {
        self.opt.step(&mut self.net.params, grad, &self.cfg.adam)?;
        Ok(())
    }
}

/// One reward update: an expert batch from the demonstrations and an unlabeled
/// batch from half A, both augmented, then the mode's loss and an Adam step.
pub fn reward_train_step(
    model: &mut RewardModel,
    split: &SplitDataset,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<RewardStep, RewardError> {
    let data = model.data.as_ref().ok_or(RewardError::Detached)?;
    let (expert, mut consumed) = data.expert.sample(split, batch_size, rng);
    let (unlabeled, keys_u) = data.unlabeled.sample(split, batch_size, rng);
    consumed.extend(keys_u);
    let aug = |states: Vec<Vec<f64>>, rng: &mut RngStream| -> Vec<Vec<f64>> {
        states.iter().map(|s| augment_state_scaled(s, &data.noise_std, rng)).collect()
    };
    let expert = aug(expert, rng);
    let unlabeled = aug(unlabeled, rng);
    let constraints = match &data.constraints {
        Some(cs) => {
            let pick = |set: &[Vec<f64>], rng: &mut RngStream| -> Vec<Vec<f64>> {
                use rand::Rng;
                (0..batch_size)
                    .map(|_| augment_state_scaled(&set[rng.random_range(0..set.len())], &data.noise_std, rng))
                    .collect()
            };
            Some(ConstraintSets { expert_early: pick(&cs.expert_early, rng), unlabeled_early: pick(&cs.unlabeled_early, rng) })
        }
        None => None,
    };
    let (loss, trail_active) = model.loss(&expert, &unlabeled, constraints.as_ref())?;
    model.apply(&loss.grad)?;
    Ok(RewardStep { loss: loss.value, consumed, trail_active })
}

/// Source of per-transition rewards for the critic target.
#[derive(Debug, Clone, Copy)]
pub enum Annotator<'a> {
    /// `R_ψ'(s_{t+1})` from the frozen target network.
    Learned(&'a RewardModel),
    /// 1 for demonstration rows, 0 for unlabeled rows.
    Flat,
}

impl Annotator<'_> {
    pub fn annotate_batch(&self, batch: &TransitionBatch) -> Vec<f64> {
        match self {
            Annotator::Learned(m) => (0..batch.len()).map(|i| m.predict_target(batch.next_state(i))).collect(),
            Annotator::Flat => batch.origin.iter().map(|&o| flat_reward(o)).collect(),
        }
    }
}

/// Reward estimates `r̂_t` for every transition of every episode of `d`.
pub fn annotate(annotator: Annotator<'_>, d: &Dataset, origin: Origin) -> Vec<Vec<f64>> {
    d.episodes()
        .iter()
        .map(|e| {
            (0..e.len())
                .map(|t| match annotator {
                    Annotator::Learned(m) => m.predict_target(&e.state_f64(t + 1)),
                    Annotator::Flat => flat_reward(origin),
                })
                .collect()
        })
        .collect()
}
