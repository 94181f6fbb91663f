//! Critic-regularized regression with a distributional critic, behavior
//! cloning baselines, the joint training loop and policy evaluation.
//!
//! The critic is a categorical distribution over fixed value atoms, trained
//! by cross-entropy against the projected Bellman target built from the
//! target critic and an action sampled from the target policy. The policy is
//! a Gaussian mixture trained by behavior cloning, masked per row by whether
//! the logged action's value beats the policy's own sampled-action average.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diffcore::{
    categorical_mean, gmm_log_prob_raw_grad, gmm_sample, softmax, AdamConfig, AdamState, Approximator,
    DiffError, GmmOutput, Head, Support, Tape, TargetCopy,
};
use crate::rewardlearn::{reward_train_step, Annotator, RewardConfig, RewardError, RewardMode, RewardModel};
use crate::rng::{self, tags, RngStream};
use crate::trajdata::{
    DataError, Dataset, Source, SplitDataset, StateKey, TransitionBatch, TransitionKey, TransitionSampler,
};
use crate::worldsim::{rollout, Env, SimError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainMethod {
    BcPos,
    BcAll,
    Fr,
    OrilR,
    OrilP,
    OrilT,
    CrrGt,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 7] = [
        TrainMethod::BcPos,
        TrainMethod::BcAll,
        TrainMethod::Fr,
        TrainMethod::OrilR,
        TrainMethod::OrilP,
        TrainMethod::OrilT,
        TrainMethod::CrrGt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::BcPos => "BC_POS",
            TrainMethod::BcAll => "BC_ALL",
            TrainMethod::Fr => "FR",
            TrainMethod::OrilR => "ORIL_R",
            TrainMethod::OrilP => "ORIL_P",
            TrainMethod::OrilT => "ORIL_T",
            TrainMethod::CrrGt => "CRR_GT",
        }
    }

    pub fn is_bc(self) -> bool {
        matches!(self, TrainMethod::BcPos | TrainMethod::BcAll)
    }

    /// The reward-model loss this method trains, if it learns a reward at all.
    pub fn reward_mode(self, eta: f64, pu_nonneg: bool, trail_k: usize) -> Option<RewardMode> {
        match self {
            TrainMethod::OrilR => Some(RewardMode::Bce),
            TrainMethod::OrilP => Some(RewardMode::Pu { eta, nonneg: pu_nonneg }),
            TrainMethod::OrilT => Some(RewardMode::Trail { k: trail_k }),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMethod {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        TrainMethod::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| AgentError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Target networks are copied every this many steps.
    pub sync_period: u64,
    /// Policy samples per state for the value estimate.
    pub m_samples: usize,
    /// Rows drawn from the demonstrations per step.
    pub expert_batch: usize,
    /// Rows drawn from each unlabeled half per step.
    pub unlabeled_batch: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub components: usize,
    pub std_floor: f64,
    pub support: Support,
    pub policy_adam: AdamConfig,
    pub critic_adam: AdamConfig,
    /// Evaluate with sampled actions (true) or the heaviest component's mean.
    pub eval_sample: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            sync_period: 100,
            m_samples: 4,
            expert_batch: 256,
            unlabeled_batch: 256,
            hidden: vec![64, 64],
            layer_norm: true,
            components: 5,
            std_floor: 1e-3,
            support: Support::new(0.0, 100.0, 51),
            policy_adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
            eval_sample: true,
        }
    }
}

/// Policy, critic, their frozen copies and optimizer states.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub policy: Approximator,
    pub critic: Approximator,
    pub policy_target: TargetCopy,
    pub critic_target: TargetCopy,
    pub cfg: AgentConfig,
    pub policy_opt: AdamState,
    pub critic_opt: AdamState,
}

impl AgentBundle {
    pub fn new(obs_dim: usize, act_dim: usize, cfg: AgentConfig, rng: &mut RngStream) -> Self {
        let policy = Approximator::new(
            obs_dim,
            &cfg.hidden,
            cfg.layer_norm,
            Head::Gmm { components: cfg.components, act_dim, std_floor: cfg.std_floor },
            0.1,
            rng,
        );
        let critic = Approximator::new(obs_dim + act_dim, &cfg.hidden, cfg.layer_norm, Head::Categorical(cfg.support), 0.1, rng);
        Self::from_nets(policy, critic, cfg)
    }

    pub fn from_nets(policy: Approximator, critic: Approximator, cfg: AgentConfig) -> Self {
        Self {
            policy_target: TargetCopy::of(&policy),
            critic_target: TargetCopy::of(&critic),
            policy_opt: AdamState::new(policy.param_count()),
            critic_opt: AdamState::new(critic.param_count()),
            policy,
            critic,
            cfg,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self.policy.head() {
            Head::Gmm { act_dim, .. } => act_dim,
            _ => unreachable!("policy head is a mixture"),
        }
    }
}

fn gmm_params(policy: &Approximator) -> (usize, usize, f64) {
    match policy.head() {
        Head::Gmm { components, act_dim, std_floor } => (components, act_dim, std_floor),
        other => panic!("policy head must be a mixture, got {other}"),
    }
}

fn support_of(critic: &Approximator) -> Support {
    match critic.head() {
        Head::Categorical(s) => s,
        other => panic!("critic head must be categorical, got {other}"),
    }
}

fn policy_dist(policy: &Approximator, s: &[f64], tape: &mut Tape) -> GmmOutput {
    let (k, a, floor) = gmm_params(policy);
    policy.forward_raw(s, tape).expect("state dimension");
    GmmOutput::from_raw(&tape.out, k, a, floor)
}

/// Probabilities of the critic's value distribution at `(s, a)`.
fn critic_probs(critic: &Approximator, s: &[f64], a: &[f64], input: &mut Vec<f64>, tape: &mut Tape) -> Vec<f64> {
    input.clear();
    input.extend_from_slice(s);
    input.extend_from_slice(a);
    critic.forward_raw(input, tape).expect("state-action dimension");
    softmax(&tape.out)
}

/// Scalar value `E[Z(s, a)]` of the critic.
pub fn critic_value(critic: &Approximator, s: &[f64], a: &[f64]) -> f64 {
    let atoms = support_of(critic).atoms();
    categorical_mean(&critic_probs(critic, s, a, &mut Vec::new(), &mut Tape::default()), &atoms)
}

/// Projects probability mass located at arbitrary `values` onto `support`:
/// each value is clamped to the support range and its mass split linearly
/// between the two nearest atoms.
pub fn categorical_projection(values: &[f64], probs: &[f64], support: &Support) -> Vec<f64> {
    let mut out = vec![0.0; support.n_atoms];
    let delta = support.delta();
    let top = support.n_atoms - 1;
    for (&v, &p) in values.iter().zip(probs) {
        let b = ((v.clamp(support.v_min, support.v_max) - support.v_min) / delta).clamp(0.0, top as f64);
        let lo = b.floor() as usize;
        let frac = b - lo as f64;
        if lo >= top || frac == 0.0 {
            out[lo.min(top)] += p;
        } else {
            out[lo] += p * (1.0 - frac);
            out[lo + 1] += p * frac;
        }
    }
    out
}

/// Projected Bellman targets `r̂ + γ Z'(s', a')` with `a' ~ π'(s')`, one per row.
pub fn critic_targets(bundle: &AgentBundle, batch: &TransitionBatch, rewards: &[f64], rng: &mut RngStream) -> Vec<Vec<f64>> {
    assert_eq!(rewards.len(), batch.len(), "one reward per row");
    let support = bundle.cfg.support;
    let atoms = support.atoms();
    let gamma = bundle.cfg.gamma;
    let mut tape = Tape::default();
    let mut input = Vec::new();
    let mut shifted = vec![0.0; atoms.len()];
    (0..batch.len())
        .map(|i| {
            let next = batch.next_state(i);
            let a_next = gmm_sample(&policy_dist(bundle.policy_target.net(), next, &mut tape), rng);
            let probs = critic_probs(bundle.critic_target.net(), next, &a_next, &mut input, &mut tape);
            for (z, &atom) in shifted.iter_mut().zip(&atoms) {
                *z = rewards[i] + gamma * atom;
            }
            categorical_projection(&shifted, &probs, &support)
        })
        .collect()
}

/// Mean cross-entropy between target distributions and the critic at `(s_t, a_t)`.
pub fn critic_loss(critic: &Approximator, batch: &TransitionBatch, targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; critic.param_count()];
    let mut tape = Tape::default();
    let mut input = Vec::new();
    let mut dz = Vec::new();
    let mut loss = 0.0;
    for (i, target) in targets.iter().enumerate() {
        input.clear();
        input.extend_from_slice(batch.state(i));
        input.extend_from_slice(batch.action(i));
        critic.forward_raw(&input, &mut tape).expect("state-action dimension");
        let logits = &tape.out;
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        dz.clear();
        for (z, &t) in logits.iter().zip(target) {
            loss -= t * (z - lse);
            dz.push(((z - lse).exp() - t) / n);
        }
        critic.backward_raw(&mut tape, &dz, &mut grad, None).expect("shapes");
    }
    (loss / n, grad)
}

/// One cross-entropy step of the critic toward the projected Bellman targets.
pub fn critic_update(
    bundle: &mut AgentBundle,
    batch: &TransitionBatch,
    rewards: &[f64],
    rng: &mut RngStream,
) -> Result<f64, AgentError> {
    let targets = critic_targets(bundle, batch, rewards, rng);
    let (loss, grad) = critic_loss(&bundle.critic, batch, &targets);
    bundle.critic_opt.step(&mut bundle.critic.params, &grad, &bundle.cfg.critic_adam)?;
    Ok(loss)
}

/// `Q(s, π(s))`: mean critic value over `m` actions sampled from the online policy.
pub fn estimate_policy_value(bundle: &AgentBundle, s: &[f64], rng: &mut RngStream) -> f64 {
    let atoms = bundle.cfg.support.atoms();
    let mut tape = Tape::default();
    let mut input = Vec::new();
    let dist = policy_dist(&bundle.policy, s, &mut tape);
    let m = bundle.cfg.m_samples.max(1);
    (0..m)
        .map(|_| {
            let a = gmm_sample(&dist, rng);
            categorical_mean(&critic_probs(&bundle.critic, s, &a, &mut input, &mut tape), &atoms)
        })
        .sum::<f64>()
        / m as f64
}

/// Per-row indicator `Q(s_t, a_t) > Q(s_t, π(s_t))`.
pub fn crr_indicators(bundle: &AgentBundle, batch: &TransitionBatch, rng: &mut RngStream) -> Vec<bool> {
    let atoms = bundle.cfg.support.atoms();
    let mut tape = Tape::default();
    let mut input = Vec::new();
    (0..batch.len())
        .map(|i| {
            let s = batch.state(i);
            let q = categorical_mean(&critic_probs(&bundle.critic, s, batch.action(i), &mut input, &mut tape), &atoms);
            q > estimate_policy_value(bundle, s, rng)
        })
        .collect()
}

/// `mean_i -w_i log π(a_i | s_i)` and its gradient; rows with zero weight are skipped.
pub fn weighted_policy_loss(policy: &Approximator, batch: &TransitionBatch, weights: &[f64]) -> (f64, Vec<f64>) {
    let (k, a_dim, floor) = gmm_params(policy);
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.param_count()];
    let mut raw_grad = vec![0.0; policy.head().raw_dim()];
    let mut tape = Tape::default();
    let mut loss = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        policy.forward_raw(batch.state(i), &mut tape).expect("state dimension");
        let lp = gmm_log_prob_raw_grad(&tape.out, k, a_dim, floor, batch.action(i), &mut raw_grad);
        loss -= w * lp;
        raw_grad.iter_mut().for_each(|g| *g *= -w / n);
        policy.backward_raw(&mut tape, &raw_grad, &mut grad, None).expect("shapes");
    }
    (loss / n, grad)
}

/// Negative log-likelihood of the logged actions.
pub fn bc_loss(policy: &Approximator, batch: &TransitionBatch) -> (f64, Vec<f64>) {
    weighted_policy_loss(policy, batch, &vec![1.0; batch.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub indicator_rate: f64,
}

/// Behavior cloning masked by the critic's indicator; no gradient reaches the critic.
pub fn crr_policy_loss(bundle: &AgentBundle, batch: &TransitionBatch, rng: &mut RngStream) -> PolicyLoss {
    let ind = crr_indicators(bundle, batch, rng);
    let weights: Vec<f64> = ind.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let (value, grad) = weighted_policy_loss(&bundle.policy, batch, &weights);
    let indicator_rate = weights.iter().sum::<f64>() / batch.len().max(1) as f64;
    PolicyLoss { value, grad, indicator_rate }
}

/// Copies policy, critic and (when given) reward parameters into their targets.
pub fn sync_targets(bundle: &mut AgentBundle, reward: Option<&mut RewardModel>) {
    bundle.policy_target.sync(&bundle.policy);
    bundle.critic_target.sync(&bundle.critic);
    if let Some(r) = reward {
        r.sync_target();
    }
}

/// Ground-truth per-step rewards keyed by episode id, kept apart from the stripped split.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    rewards: HashMap<u64, Vec<f32>>,
}

impl GroundTruth {
    pub fn from_dataset(raw: &Dataset) -> Result<Self, DataError> {
        let mut rewards = HashMap::new();
        for e in raw.episodes() {
            let r = e.gt_rewards().ok_or(DataError::MissingGroundTruth { id: e.id() })?;
            rewards.insert(e.id(), r.to_vec());
        }
        Ok(Self { rewards })
    }

    pub fn reward(&self, key: &TransitionKey) -> Option<f64> {
        self.rewards.get(&key.episode_id).and_then(|r| r.get(key.t)).map(|&x| x as f64)
    }
}

/// One row of the per-step metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub method: TrainMethod,
    pub reward_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_loss: f64,
    pub indicator_rate: Option<f64>,
}

/// Everything a step drew from the split, for auditing set discipline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub reward_states: Vec<StateKey>,
    pub agent_rows: Vec<TransitionKey>,
}

/// Owns a run's networks, data and random stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub bundle: AgentBundle,
    pub reward: Option<RewardModel>,
    method: TrainMethod,
    split: SplitDataset,
    gt: Option<GroundTruth>,
    samplers: Vec<(TransitionSampler, usize)>,
    rng: RngStream,
    step: u64,
}

impl Trainer {
    /// `reward_cfg.mode` must be the mode of `method` (ignored for non-learned rewards);
    /// `gt` is required by `CRR_GT` and discarded by every other method.
    pub fn new(
        split: SplitDataset,
        method: TrainMethod,
        cfg: AgentConfig,
        reward_cfg: RewardConfig,
        gt: Option<GroundTruth>,
        seed: u64,
    ) -> Result<Self, AgentError> {
        let mut init = rng::stream(seed, tags::INIT);
        let bundle = AgentBundle::new(split.obs_dim(), split.act_dim(), cfg, &mut init);
        let reward = match method {
            TrainMethod::OrilR | TrainMethod::OrilP | TrainMethod::OrilT => {
                let expected = std::mem::discriminant(&method.reward_mode(0.5, false, 1).expect("learned"));
                if std::mem::discriminant(&reward_cfg.mode) != expected {
                    return Err(AgentError::Config(format!("{method} cannot train a {} reward", reward_cfg.mode)));
                }
                let mut m = RewardModel::new(split.obs_dim(), reward_cfg, &mut init);
                m.attach(&split)?;
                Some(m)
            }
            _ => None,
        };
        let gt = match method {
            TrainMethod::CrrGt => Some(gt.ok_or_else(|| AgentError::Config("CRR_GT needs ground-truth rewards".into()))?),
            _ => None,
        };
        let cfg = &bundle.cfg;
        let total = cfg.expert_batch + 2 * cfg.unlabeled_batch;
        let samplers = match method {
            TrainMethod::BcPos => vec![(TransitionSampler::new(&split, &[Source::Expert])?, total)],
            TrainMethod::BcAll => {
                vec![(TransitionSampler::new(&split, &[Source::Expert, Source::HalfA, Source::HalfB])?, total)]
            }
            _ => vec![
                (TransitionSampler::new(&split, &[Source::Expert])?, cfg.expert_batch),
                (TransitionSampler::new(&split, &[Source::HalfA])?, cfg.unlabeled_batch),
                (TransitionSampler::new(&split, &[Source::HalfB])?, cfg.unlabeled_batch),
            ],
        };
        Ok(Self { bundle, reward, method, split, gt, samplers, rng: rng::stream(seed, tags::TRAIN), step: 0 })
    }

    pub fn method(&self) -> TrainMethod {
        self.method
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn split(&self) -> &SplitDataset {
        &self.split
    }

    pub fn step(&mut self) -> Result<MetricsRecord, AgentError> {
        Ok(self.step_traced()?.0)
    }

    /// One step of the method's update, plus the keys of everything sampled.
    pub fn step_traced(&mut self) -> Result<(MetricsRecord, StepTrace), AgentError> {
        let mut trace = StepTrace::default();
        let parts: Vec<TransitionBatch> =
            self.samplers.iter().map(|(s, n)| s.sample(&self.split, *n, &mut self.rng)).collect();
        let batch = TransitionBatch::concat(&parts);
        trace.agent_rows = batch.keys.clone();
        let mut record = MetricsRecord {
            step: self.step,
            method: self.method,
            reward_loss: None,
            critic_loss: None,
            policy_loss: 0.0,
            indicator_rate: None,
        };
        if self.method.is_bc() {
            let (loss, grad) = bc_loss(&self.bundle.policy, &batch);
            self.bundle.policy_opt.step(&mut self.bundle.policy.params, &grad, &self.bundle.cfg.policy_adam)?;
            record.policy_loss = loss;
        } else {
            if let Some(reward) = self.reward.as_mut() {
                let r = reward_train_step(reward, &self.split, self.bundle.cfg.expert_batch, &mut self.rng)?;
                record.reward_loss = Some(r.loss);
                trace.reward_states = r.consumed;
            }
            let rewards = match (&self.reward, &self.gt) {
                (Some(model), _) => Annotator::Learned(model).annotate_batch(&batch),
                (None, Some(gt)) => batch
                    .keys
                    .iter()
                    .map(|k| gt.reward(k).ok_or(DataError::MissingGroundTruth { id: k.episode_id }))
                    .collect::<Result<_, _>>()?,
                (None, None) => Annotator::Flat.annotate_batch(&batch),
            };
            record.critic_loss = Some(critic_update(&mut self.bundle, &batch, &rewards, &mut self.rng)?);
            let pl = crr_policy_loss(&self.bundle, &batch, &mut self.rng);
            self.bundle.policy_opt.step(&mut self.bundle.policy.params, &pl.grad, &self.bundle.cfg.policy_adam)?;
            record.policy_loss = pl.value;
            record.indicator_rate = Some(pl.indicator_rate);
        }
        self.step += 1;
        if self.step % self.bundle.cfg.sync_period == 0 {
            sync_targets(&mut self.bundle, self.reward.as_mut());
        }
        Ok((record, trace))
    }
}

/// Mean ground-truth return of `policy` over `n_episodes` seeded episodes.
pub fn evaluate(policy: &Approximator, env: &Env, n_episodes: usize, seed: u64, sample: bool) -> Result<f64, AgentError> {
    if n_episodes == 0 {
        return Err(AgentError::Config("evaluation needs at least one episode".into()));
    }
    let mut tape = Tape::default();
    let mut total = 0.0;
    for i in 0..n_episodes as u64 {
        let episode_seed = rng::derive_seed(seed, i);
        let mut r = rng::stream(episode_seed, tags::EVAL);
        let ep = rollout(
            env,
            |obs, r| {
                let dist = policy_dist(policy, obs, &mut tape);
                if sample {
                    gmm_sample(&dist, r)
                } else {
                    dist.mode_action()
                }
            },
            i,
            episode_seed,
            &mut r,
        )?;
        total += ep.gt_rewards().expect("rollouts record rewards").iter().map(|&x| x as f64).sum::<f64>();
    }
    Ok(total / n_episodes as f64)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::diffcore::{grad_check, probe_coords, Topology};
    use crate::trajdata::{build_split, Episode, Origin, SuccessRule};
    use crate::worldsim::{generate_dataset, PolicyKind};

    /// Brute force: atom `i` receives `p · max(0, 1 - |clamp(v) - z_i| / Δ)`.
    fn projection_oracle(values: &[f64], probs: &[f64], support: &Support) -> Vec<f64> {
        let atoms = support.atoms();
        let delta = support.delta();
        atoms
            .iter()
            .map(|&z| {
                values
                    .iter()
                    .zip(probs)
                    .map(|(&v, &p)| p * (1.0 - (v.clamp(support.v_min, support.v_max) - z).abs() / delta).max(0.0))
                    .sum()
            })
            .collect()
    }

    fn random_probs(n: usize, rng: &mut RngStream) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|x| x / total).collect()
    }

    #[test]
    fn projection_midpoint_and_clamp() {
        let s = Support::new(0.0, 1.0, 3);
        assert_eq!(categorical_projection(&[0.25], &[1.0], &s), vec![0.5, 0.5, 0.0]);
        assert_eq!(categorical_projection(&[7.0], &[1.0], &s), vec![0.0, 0.0, 1.0]);
        assert_eq!(categorical_projection(&[-3.0], &[1.0], &s), vec![1.0, 0.0, 0.0]);
        assert_eq!(categorical_projection(&[0.5], &[1.0], &s), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_matches_oracle_on_small_supports() {
        let mut r = rng::stream(1, 0);
        for _ in 0..2000 {
            let n = r.random_range(2..=7);
            let s = Support::new(r.random_range(-5.0..0.0), r.random_range(0.5..5.0), n);
            let k = r.random_range(1..9);
            let values: Vec<f64> = (0..k).map(|_| r.random_range(-8.0..8.0)).collect();
            let probs = random_probs(k, &mut r);
            let got = categorical_projection(&values, &probs, &s);
            for (g, o) in got.iter().zip(projection_oracle(&values, &probs, &s)) {
                assert!((g - o).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_conserves_mass(
            values in proptest::collection::vec(-200.0f64..300.0, 51),
            weights in proptest::collection::vec(0.001f64..1.0, 51),
        ) {
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let out = categorical_projection(&values, &probs, &Support::new(0.0, 100.0, 51));
            prop_assert!(out.iter().all(|&p| p >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn toy_batch(obs_dim: usize, act_dim: usize, rows: usize, rng: &mut RngStream) -> TransitionBatch {
        let mut b = TransitionBatch::empty(obs_dim, act_dim);
        for i in 0..rows {
            b.states.extend((0..obs_dim).map(|_| rng.random_range(-1.0..1.0)));
            b.actions.extend((0..act_dim).map(|_| rng.random_range(-0.9..0.9)));
            b.next_states.extend((0..obs_dim).map(|_| rng.random_range(-1.0..1.0)));
            b.origin.push(if i % 3 == 0 { Origin::Expert } else { Origin::Unlabeled });
            b.keys.push(TransitionKey { source: Source::Expert, episode: 0, episode_id: 0, t: i });
        }
        b
    }

    fn small_cfg(support: Support) -> AgentConfig {
        AgentConfig { hidden: vec![12, 12], components: 3, support, ..Default::default() }
    }

    fn bundle(obs: usize, act: usize, cfg: AgentConfig, seed: u64) -> AgentBundle {
        AgentBundle::new(obs, act, cfg, &mut rng::stream(seed, 0))
    }

    #[test]
    fn zero_discount_target_is_projected_reward() {
        let mut r = rng::stream(2, 0);
        let support = Support::new(0.0, 2.0, 5);
        let b = bundle(2, 1, AgentConfig { gamma: 0.0, ..small_cfg(support) }, 2);
        let batch = toy_batch(2, 1, 6, &mut r);
        let rewards: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
        let targets = critic_targets(&b, &batch, &rewards, &mut r);
        for (t, &rw) in targets.iter().zip(&rewards) {
            let point = categorical_projection(&[rw], &[1.0], &support);
            for (x, y) in t.iter().zip(&point) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_target_gives_zero_critic_gradient() {
        let mut r = rng::stream(3, 0);
        let b = bundle(2, 1, small_cfg(Support::new(0.0, 10.0, 11)), 3);
        let batch = toy_batch(2, 1, 4, &mut r);
        let targets: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut input = batch.state(i).to_vec();
                input.extend_from_slice(batch.action(i));
                let mut tape = Tape::default();
                b.critic.forward_raw(&input, &mut tape).unwrap();
                softmax(&tape.out)
            })
            .collect();
        let (_, grad) = critic_loss(&b.critic, &batch, &targets);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    /// Linear policy whose output is `raw` regardless of state.
    fn constant_policy(obs: usize, components: usize, act_dim: usize, raw: &[f64]) -> Approximator {
        let out = raw.len();
        let mut params = vec![0.0; obs * out];
        params.extend_from_slice(raw);
        Approximator::from_parts(Topology::new(obs, &[], out, false), Head::Gmm { components, act_dim, std_floor: 1e-3 }, params).unwrap()
    }

    #[test]
    fn toy_mdp_critic_converges_to_discounted_return() {
        // one state looping to itself with a fixed action and reward 0.5: Q = 0.5 / (1 - 0.9) = 5
        let support = Support::new(0.0, 10.0, 51);
        let cfg = AgentConfig {
            gamma: 0.9,
            sync_period: 1,
            critic_adam: AdamConfig { lr: 1e-2, ..Default::default() },
            ..small_cfg(support)
        };
        let mut r = rng::stream(4, 0);
        let critic = Approximator::new(2, &[16], true, Head::Categorical(support), 0.1, &mut r);
        let policy = constant_policy(1, 1, 1, &[0.3, -30.0, 0.0]);
        let mut b = AgentBundle::from_nets(policy, critic, cfg);
        let mut batch = TransitionBatch::empty(1, 1);
        for _ in 0..8 {
            batch.states.push(0.2);
            batch.actions.push(0.3);
            batch.next_states.push(0.2);
            batch.origin.push(Origin::Expert);
            batch.keys.push(TransitionKey { source: Source::Expert, episode: 0, episode_id: 0, t: 0 });
        }
        let rewards = vec![0.5; 8];
        for _ in 0..2000 {
            critic_update(&mut b, &batch, &rewards, &mut r).unwrap();
            sync_targets(&mut b, None);
        }
        let q = critic_value(&b.critic, &[0.2], &[0.3]);
        assert!((q - 5.0).abs() / 5.0 < 0.05, "{q}");
    }

    #[test]
    fn constant_critic_value_estimate() {
        let support = Support::new(0.0, 10.0, 11);
        let mut b = bundle(3, 2, small_cfg(support), 5);
        b.critic.zero_final_layer();
        let mut r = rng::stream(5, 0);
        for m in [1, 4, 9] {
            b.cfg.m_samples = m;
            assert!((estimate_policy_value(&b, &[0.1, 0.2, 0.3], &mut r) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_estimate_is_one_evaluation() {
        let support = Support::new(0.0, 10.0, 11);
        let mut b = bundle(2, 1, small_cfg(support), 6);
        b.cfg.m_samples = 1;
        let s = [0.4, -0.2];
        let est = estimate_policy_value(&b, &s, &mut rng::stream(6, 1));
        let mut r = rng::stream(6, 1);
        let a = gmm_sample(&policy_dist(&b.policy, &s, &mut Tape::default()), &mut r);
        assert_eq!(est, critic_value(&b.critic, &s, &a));
    }

    #[test]
    fn value_estimate_converges_to_quadrature() {
        // two atoms {0, 1} with logits (0, w·a): Q(s, a) = sigmoid(w a)
        let support = Support::new(0.0, 1.0, 2);
        let w = 2.5;
        let critic = Approximator::from_parts(
            Topology::new(2, &[], 2, false),
            Head::Categorical(support),
            vec![0.0, 0.0, 0.0, w, 0.0, 0.0],
        )
        .unwrap();
        let (mean, std_pre) = (0.2, 0.0);
        let std = crate::diffcore::softplus(std_pre) + 1e-3;
        let policy = constant_policy(1, 1, 1, &[mean, std_pre, 0.0]);
        let b = AgentBundle::from_nets(policy, critic, AgentConfig { m_samples: 200_000, ..small_cfg(support) });
        // quadrature over the unclipped normal, with clipping applied to the sample
        let n = 200_000;
        let (lo, hi) = (mean - 10.0 * std, mean + 10.0 * std);
        let h = (hi - lo) / n as f64;
        let oracle: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                crate::diffcore::sigmoid(w * x.clamp(-1.0, 1.0)) * crate::diffcore::normal_pdf(x, mean, std) * h
            })
            .sum();
        let est = estimate_policy_value(&b, &[0.0], &mut rng::stream(7, 0));
        // Monte Carlo standard error is below 0.3 / sqrt(2e5) ≈ 7e-4
        assert!((est - oracle).abs() < 4e-3, "{est} vs {oracle}");
    }

    #[test]
    fn indicator_cases() {
        // Q(s, a) = a on support [0, 1] with two atoms: logits (0, logit(a))
        let support = Support::new(0.0, 1.0, 2);
        let critic = Approximator::from_parts(Topology::new(2, &[], 2, false), Head::Categorical(support), vec![0.0; 6]).unwrap();
        let policy = constant_policy(1, 1, 1, &[0.0, -30.0, 0.0]);
        let mut b = AgentBundle::from_nets(policy, critic, AgentConfig { m_samples: 1, ..small_cfg(support) });
        // critic constant 0.5 everywhere except through the bias of the second logit
        let set_q = |b: &mut AgentBundle, q: f64| b.critic.params[5] = (q / (1.0 - q)).ln();
        let mut batch = TransitionBatch::empty(1, 1);
        batch.states.push(0.0);
        batch.actions.push(0.5);
        batch.next_states.push(0.0);
        batch.origin.push(Origin::Expert);
        batch.keys.push(TransitionKey { source: Source::Expert, episode: 0, episode_id: 0, t: 0 });
        // Q(s, a_t) and the estimate coincide for a state-action-independent critic: strict > is off
        set_q(&mut b, 0.7);
        let pl = crr_policy_loss(&b, &batch, &mut rng::stream(8, 0));
        assert_eq!(pl.indicator_rate, 0.0);
        assert!(pl.grad.iter().all(|&g| g == 0.0));
        assert_eq!(pl.value, 0.0);
        // make Q depend on the action: Q(s, a) = sigmoid(4 a); logged 0.5 vs policy mode 0.0
        b.critic.params[3] = 4.0;
        b.critic.params[5] = 0.0;
        let pl = crr_policy_loss(&b, &batch, &mut rng::stream(8, 0));
        assert_eq!(pl.indicator_rate, 1.0);
        assert_eq!((pl.value, pl.grad.clone()), bc_loss(&b.policy, &batch));
        b.critic.params[3] = -4.0;
        let pl = crr_policy_loss(&b, &batch, &mut rng::stream(8, 0));
        assert_eq!(pl.indicator_rate, 0.0);
        assert!(pl.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forced_indicator_equals_bc_on_random_batches() {
        // policy pinned near a = (-1, -1) and Q(s, a) = sigmoid(3 (a_0 + a_1)): every logged
        // action in (-0.9, 0.9)^2 beats the policy's samples
        let mut r = rng::stream(9, 0);
        let support = Support::new(0.0, 1.0, 2);
        let mut w = vec![0.0; 5 * 2];
        w[8] = 3.0;
        w[9] = 3.0;
        w.extend([0.0, 0.0]);
        let critic = Approximator::from_parts(Topology::new(5, &[], 2, false), Head::Categorical(support), w).unwrap();
        for _ in 0..5 {
            let raw: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..-0.95)).chain((0..6).map(|_| -30.0)).chain([0.1, 0.2, 0.3]).collect();
            let policy = constant_policy(3, 3, 2, &raw);
            let b = AgentBundle::from_nets(policy, critic.clone(), small_cfg(support));
            let batch = toy_batch(3, 2, 16, &mut r);
            let pl = crr_policy_loss(&b, &batch, &mut r);
            assert_eq!(pl.indicator_rate, 1.0);
            let (value, grad) = bc_loss(&b.policy, &batch);
            assert!((pl.value - value).abs() < 1e-12);
            assert!(pl.grad.iter().zip(&grad).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn degenerate_critic_gives_zero_policy_gradient() {
        let mut r = rng::stream(10, 0);
        let mut b = bundle(3, 2, small_cfg(Support::new(0.0, 10.0, 11)), 10);
        b.critic.zero_final_layer();
        let batch = toy_batch(3, 2, 20, &mut r);
        let pl = crr_policy_loss(&b, &batch, &mut r);
        assert!(pl.grad.iter().all(|&g| g == 0.0));
        assert_eq!(pl.indicator_rate, 0.0);
    }

    #[test]
    fn bc_loss_row_and_duplication() {
        let mut r = rng::stream(11, 0);
        let b = bundle(3, 2, small_cfg(Support::new(0.0, 1.0, 2)), 11);
        let batch = toy_batch(3, 2, 5, &mut r);
        let single = TransitionBatch {
            states: batch.state(0).to_vec(),
            actions: batch.action(0).to_vec(),
            next_states: batch.next_state(0).to_vec(),
            origin: vec![batch.origin[0]],
            keys: vec![batch.keys[0]],
            ..TransitionBatch::empty(3, 2)
        };
        let dist = b.policy.forward(batch.state(0)).unwrap();
        let crate::diffcore::HeadOutput::Gmm(g) = dist else { panic!() };
        assert!((bc_loss(&b.policy, &single).0 + crate::diffcore::gmm_log_prob(&g, batch.action(0))).abs() < 1e-12);
        let doubled = TransitionBatch::concat(&[batch.clone(), batch.clone()]);
        let (l1, g1) = bc_loss(&b.policy, &batch);
        let (l2, g2) = bc_loss(&b.policy, &doubled);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn bc_single_pair_converges_to_its_mode() {
        let policy = {
            let mut r = rng::stream(12, 0);
            Approximator::new(2, &[8], false, Head::Gmm { components: 1, act_dim: 1, std_floor: 0.05 }, 0.1, &mut r)
        };
        let mut opt = AdamState::new(policy.param_count());
        let mut policy = policy;
        let mut batch = TransitionBatch::empty(2, 1);
        for _ in 0..4 {
            batch.states.extend([0.3, -0.1]);
            batch.actions.push(0.6);
            batch.next_states.extend([0.0, 0.0]);
            batch.origin.push(Origin::Expert);
            batch.keys.push(TransitionKey { source: Source::Expert, episode: 0, episode_id: 0, t: 0 });
        }
        let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
        for _ in 0..3000 {
            let (_, g) = bc_loss(&policy, &batch);
            opt.step(&mut policy.params, &g, &cfg).unwrap();
        }
        let crate::diffcore::HeadOutput::Gmm(g) = policy.forward(&[0.3, -0.1]).unwrap() else { panic!() };
        assert!((g.means[0] - 0.6).abs() < 1e-3);
        // the std collapses toward its floor, so the loss approaches -log N(0; 0, floor)
        let at_mode = -(-(0.05f64).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln());
        assert!((bc_loss(&policy, &batch).0 - at_mode).abs() < 0.05);
    }

    #[test]
    fn policy_and_critic_losses_pass_gradient_checks() {
        let mut r = rng::stream(13, 0);
        let support = Support::new(0.0, 5.0, 11);
        for trial in 0..3 {
            let b = bundle(3, 2, small_cfg(support), 100 + trial);
            let batch = toy_batch(3, 2, 8, &mut r);
            let rewards: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
            let targets = critic_targets(&b, &batch, &rewards, &mut r);
            let coords = probe_coords(b.critic.param_count(), 25, &mut r);
            let e = grad_check(&b.critic, |c| critic_loss(c, &batch, &targets), &coords, 1e-5);
            assert!(e < 1e-4, "critic {e}");
            let weights: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
            let coords = probe_coords(b.policy.param_count(), 25, &mut r);
            let e = grad_check(&b.policy, |p| weighted_policy_loss(p, &batch, &weights), &coords, 1e-5);
            assert!(e < 1e-4, "policy {e}");
        }
    }

    #[test]
    fn targets_follow_sync_period() {
        let mut b = bundle(2, 1, small_cfg(Support::new(0.0, 1.0, 3)), 14);
        let before = b.policy_target.params().to_vec();
        b.policy.params[0] += 1.0;
        b.critic.params[0] += 1.0;
        assert_eq!(b.policy_target.params(), &before[..]);
        sync_targets(&mut b, None);
        assert_eq!(b.policy_target.params(), &b.policy.params[..]);
        assert_eq!(b.critic_target.params(), &b.critic.params[..]);
    }

    #[test]
    fn method_names_parse() {
        for m in TrainMethod::ALL {
            assert_eq!(m.name().parse::<TrainMethod>().unwrap(), m);
        }
        assert_eq!("BC_pos".parse::<TrainMethod>().unwrap(), TrainMethod::BcPos);
        assert!("GAIL".parse::<TrainMethod>().is_err());
    }

    fn point_reach_split() -> (Dataset, SplitDataset) {
        let env = Env::PointReach;
        let raw = generate_dataset(
            &env,
            &[(PolicyKind::ScriptedExpert, 6), (PolicyKind::NoisyExpert(0.5), 6), (PolicyKind::Random, 12)],
            5,
        )
        .unwrap();
        let split = build_split(&raw, SuccessRule::TopQuantile(0.25), 0.5, 1).unwrap();
        (raw, split)
    }

    fn tiny_agent() -> AgentConfig {
        AgentConfig { expert_batch: 8, unlabeled_batch: 8, hidden: vec![16], sync_period: 5, ..Default::default() }
    }

    fn reward_cfg(mode: RewardMode) -> RewardConfig {
        RewardConfig { mode, hidden: vec![16], ..Default::default() }
    }

    #[test]
    fn bc_pos_never_touches_unlabeled_data() {
        let (_, split) = point_reach_split();
        let mut t = Trainer::new(split, TrainMethod::BcPos, tiny_agent(), reward_cfg(RewardMode::Bce), None, 1).unwrap();
        for _ in 0..50 {
            let (rec, trace) = t.step_traced().unwrap();
            assert!(trace.agent_rows.iter().all(|k| k.source == Source::Expert));
            assert!(trace.reward_states.is_empty() && rec.critic_loss.is_none());
        }
    }

    #[test]
    fn oril_set_discipline() {
        let (_, split) = point_reach_split();
        let half_b: HashSet<u64> = split.unlabeled_half_b.iter().map(|&i| split.unlabeled.episodes()[i].id()).collect();
        let mode = TrainMethod::OrilP.reward_mode(0.5, false, 10).unwrap();
        let mut t = Trainer::new(split, TrainMethod::OrilP, tiny_agent(), reward_cfg(mode), None, 2).unwrap();
        let mut agent_sources = HashSet::new();
        for _ in 0..30 {
            let (rec, trace) = t.step_traced().unwrap();
            assert!(rec.reward_loss.is_some());
            assert!(trace.reward_states.iter().all(|k| k.source != Source::HalfB && !half_b.contains(&k.episode_id)));
            agent_sources.extend(trace.agent_rows.iter().map(|k| k.source));
        }
        assert_eq!(agent_sources.len(), 3);
    }

    #[test]
    fn crr_gt_requires_ground_truth_and_others_drop_it() {
        let (raw, split) = point_reach_split();
        let err = Trainer::new(split.clone(), TrainMethod::CrrGt, tiny_agent(), reward_cfg(RewardMode::Bce), None, 3);
        assert!(matches!(err, Err(AgentError::Config(_))));
        let gt = GroundTruth::from_dataset(&raw).unwrap();
        let mut t = Trainer::new(split.clone(), TrainMethod::CrrGt, tiny_agent(), reward_cfg(RewardMode::Bce), Some(gt.clone()), 3).unwrap();
        t.step().unwrap();
        let fr = Trainer::new(split.clone(), TrainMethod::Fr, tiny_agent(), reward_cfg(RewardMode::Bce), Some(gt), 3).unwrap();
        assert!(fr.gt.is_none());
        assert!(GroundTruth::from_dataset(&split.unlabeled).is_err());
        let wrong = Trainer::new(split, TrainMethod::OrilT, tiny_agent(), reward_cfg(RewardMode::Bce), None, 3);
        assert!(matches!(wrong, Err(AgentError::Config(_))));
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let (_, split) = point_reach_split();
        let mode = TrainMethod::OrilT.reward_mode(0.5, false, 10).unwrap();
        let run = || {
            let mut t = Trainer::new(split.clone(), TrainMethod::OrilT, tiny_agent(), reward_cfg(mode), None, 4).unwrap();
            (0..20).map(|_| t.step().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_rejects_zero_and_is_deterministic() {
        let b = bundle(4, 2, small_cfg(Support::new(0.0, 1.0, 2)), 15);
        assert!(evaluate(&b.policy, &Env::PointReach, 0, 1, true).is_err());
        let a = evaluate(&b.policy, &Env::PointReach, 3, 1, true).unwrap();
        assert_eq!(a, evaluate(&b.policy, &Env::PointReach, 3, 1, true).unwrap());
    }

    #[test]
    fn cloned_expert_matches_expert_return() {
        let env = Env::PointReach;
        let raw = generate_dataset(&env, &[(PolicyKind::ScriptedExpert, 40)], 21).unwrap();
        let episodes: Vec<Episode> = raw.episodes().iter().map(|e| e.clone().stripped()).collect();
        let demos = Dataset::from_episodes(4, 2, episodes).unwrap();
        let split = SplitDataset::from_parts(demos, Dataset::new(4, 2), 0).unwrap();
        let sampler = TransitionSampler::new(&split, &[Source::Expert]).unwrap();
        let mut r = rng::stream(21, 1);
        let mut policy = Approximator::new(4, &[32, 32], true, Head::Gmm { components: 5, act_dim: 2, std_floor: 1e-3 }, 0.1, &mut r);
        let mut opt = AdamState::new(policy.param_count());
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        for _ in 0..3000 {
            let (_, g) = bc_loss(&policy, &sampler.sample(&split, 64, &mut r));
            opt.step(&mut policy.params, &g, &cfg).unwrap();
        }
        let expert = generate_dataset(&env, &[(PolicyKind::ScriptedExpert, 20)], 99).unwrap();
        let expert_return = expert.episodes().iter().map(|e| crate::worldsim::episodic_return(e).unwrap()).sum::<f64>() / 20.0;
        // the evaluation resets differ from the expert's, but both average 20 random starts
        let cloned = evaluate(&policy, &env, 20, 99, true).unwrap();
        assert!((cloned - expert_return).abs() / expert_return < 0.2, "{cloned} vs {expert_return}");
    }
}
