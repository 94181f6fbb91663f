//! Toy continuous-control environments with ground-truth rewards, scripted
//! behavior policies of graded quality, and offline dataset generation.
//!
//! `PointReach` is a 2D point mass with a sparse 0/1 reward; `PendulumSwing` a
//! torque-limited pendulum with a dense reward in `[0, 1]`. Both are pure
//! functions of `(state, action)`; observations are the full Markov state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, tags, RngStream};
use crate::trajdata::{DataError, Dataset, Episode};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action {0:?} outside [-1, 1]")]
    ActionRange(Vec<f64>),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("episode already finished")]
    Finished,
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
    #[error("unknown behavior policy {0:?}")]
    UnknownPolicy(String),
    #[error("mix must contain at least one episode")]
    EmptyMix,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// Per-step reward in {0, 1}.
    Sparse01,
    /// Per-step reward in [0, 1].
    DenseUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub reward_kind: RewardKind,
}

/// Environment state: the observation vector plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub mod point_reach {
    pub const DT: f64 = 0.1;
    pub const GOAL: [f64; 2] = [0.5, 0.5];
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const ARENA: f64 = 1.5;
    pub const START: f64 = 1.0;
    pub const HORIZON: usize = 100;
    /// Proportional and derivative gains of the scripted controller.
    pub const KP: f64 = 3.0;
    pub const KD: f64 = 3.0;
}

pub mod pendulum {
    pub const DT: f64 = 0.05;
    /// Gravity term of the angular acceleration (`3g / 2l`).
    pub const GRAVITY: f64 = 15.0;
    /// Angular acceleration per unit action.
    pub const TORQUE: f64 = 6.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const HORIZON: usize = 200;
    /// Below this `cos(theta)` the scripted controller pumps energy.
    pub const CATCH_COS: f64 = 0.9;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Env {
    PointReach,
    PendulumSwing,
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spec().name)
    }
}

impl FromStr for Env {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point_reach" => Ok(Env::PointReach),
            "pendulum_swing" => Ok(Env::PendulumSwing),
            other => Err(SimError::UnknownEnv(other.to_string())),
        }
    }
}

impl Env {
    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::PointReach => EnvSpec {
                name: "point_reach",
                obs_dim: 4,
                act_dim: 2,
                horizon: point_reach::HORIZON,
                reward_kind: RewardKind::Sparse01,
            },
            Env::PendulumSwing => EnvSpec {
                name: "pendulum_swing",
                obs_dim: 3,
                act_dim: 1,
                horizon: pendulum::HORIZON,
                reward_kind: RewardKind::DenseUnit,
            },
        }
    }

    /// Seeded initial state.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = rng::stream(seed, tags::RESET);
        let obs = match self {
            Env::PointReach => loop {
                let x = rng.random_range(-point_reach::START..point_reach::START);
                let y = rng.random_range(-point_reach::START..point_reach::START);
                let dist = ((x - point_reach::GOAL[0]).powi(2) + (y - point_reach::GOAL[1]).powi(2)).sqrt();
                if dist > 2.0 * point_reach::GOAL_RADIUS {
                    break vec![x, y, 0.0, 0.0];
                }
            },
            Env::PendulumSwing => {
                let theta = std::f64::consts::PI + rng.random_range(-0.2..0.2);
                pendulum_obs(theta, rng.random_range(-0.5..0.5))
            }
        };
        EnvState { obs, t: 0 }
    }

    /// Advances one step; the reward is a function of the resulting state.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepOutcome, SimError> {
        let spec = self.spec();
        if action.len() != spec.act_dim {
            return Err(SimError::Dimension { expected: spec.act_dim, got: action.len() });
        }
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(SimError::ActionRange(action.to_vec()));
        }
        if state.obs.len() != spec.obs_dim {
            return Err(SimError::Dimension { expected: spec.obs_dim, got: state.obs.len() });
        }
        if state.t >= spec.horizon {
            return Err(SimError::Finished);
        }
        let (obs, reward) = match self {
            Env::PointReach => {
                let s = &state.obs;
                let mut next = [0.0; 4];
                for d in 0..2 {
                    let mut v = s[2 + d] + point_reach::DT * action[d];
                    let mut p = s[d] + point_reach::DT * v;
                    if p.abs() > point_reach::ARENA {
                        p = p.clamp(-point_reach::ARENA, point_reach::ARENA);
                        v = 0.0;
                    }
                    next[d] = p;
                    next[2 + d] = v;
                }
                let reward = if in_goal(&next) { 1.0 } else { 0.0 };
                (next.to_vec(), reward)
            }
            Env::PendulumSwing => {
                let (theta, omega) = pendulum_angle(&state.obs);
                let accel = pendulum::GRAVITY * theta.sin() + pendulum::TORQUE * action[0];
                let omega = (omega + accel * pendulum::DT).clamp(-pendulum::MAX_SPEED, pendulum::MAX_SPEED);
                let theta = theta + omega * pendulum::DT;
                ((pendulum_obs(theta, omega)), 0.5 * (1.0 + theta.cos()))
            }
        };
        let t = state.t + 1;
        Ok(StepOutcome { next: EnvState { obs, t }, reward, done: t == spec.horizon })
    }

    /// The scripted controller's action for an observation.
    pub fn expert_action(&self, obs: &[f64]) -> Vec<f64> {
        match self {
            Env::PointReach => (0..2)
                .map(|d| {
                    let u = point_reach::KP * (point_reach::GOAL[d] - obs[d]) - point_reach::KD * obs[2 + d];
                    u.clamp(-1.0, 1.0)
                })
                .collect(),
            Env::PendulumSwing => {
                let (theta, omega) = pendulum_angle(obs);
                let u = if theta.cos() > pendulum::CATCH_COS {
                    let wrapped = theta.sin().atan2(theta.cos());
                    -(8.0 * wrapped + 1.5 * omega)
                } else {
                    // Energy pumping toward the upright energy level.
                    let energy = 0.5 * omega * omega + pendulum::GRAVITY * theta.cos();
                    let deficit = pendulum::GRAVITY - energy;
                    let dir = if omega.abs() < 1e-3 { 1.0 } else { omega.signum() };
                    dir * (0.5 * deficit).clamp(-1.0, 1.0)
                };
                vec![u.clamp(-1.0, 1.0)]
            }
        }
    }
}

fn in_goal(obs: &[f64]) -> bool {
    let dx = obs[0] - point_reach::GOAL[0];
    let dy = obs[1] - point_reach::GOAL[1];
    (dx * dx + dy * dy).sqrt() < point_reach::GOAL_RADIUS
}

fn pendulum_obs(theta: f64, omega: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin(), omega / pendulum::MAX_SPEED]
}

fn pendulum_angle(obs: &[f64]) -> (f64, f64) {
    (obs[1].atan2(obs[0]), obs[2] * pendulum::MAX_SPEED)
}

/// Observation of a pendulum at angle `theta` (0 = upright) with angular velocity `omega`.
pub fn pendulum_state(theta: f64, omega: f64) -> EnvState {
    EnvState { obs: pendulum_obs(theta, omega), t: 0 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    ScriptedExpert,
    /// Expert action plus isotropic Gaussian noise of this scale, clipped.
    NoisyExpert(f64),
    Random,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::ScriptedExpert => write!(f, "scripted"),
            PolicyKind::NoisyExpert(s) => write!(f, "noisy{s}"),
            PolicyKind::Random => write!(f, "random"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(PolicyKind::ScriptedExpert),
            "random" => Ok(PolicyKind::Random),
            _ => s
                .strip_prefix("noisy")
                .and_then(|sigma| sigma.parse::<f64>().ok())
                .filter(|sigma| *sigma >= 0.0)
                .map(PolicyKind::NoisyExpert)
                .ok_or_else(|| SimError::UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: PolicyKind,
    pub seed: u64,
}

impl BehaviorPolicy {
    pub fn act(&self, env: &Env, obs: &[f64], rng: &mut RngStream) -> Vec<f64> {
        act(self.kind, env, obs, rng)
    }
}

/// One action from a behavior policy; always inside `[-1, 1]^act_dim`.
pub fn act(kind: PolicyKind, env: &Env, obs: &[f64], rng: &mut RngStream) -> Vec<f64> {
    match kind {
        PolicyKind::ScriptedExpert => env.expert_action(obs),
        PolicyKind::NoisyExpert(sigma) => env
            .expert_action(obs)
            .into_iter()
            .map(|a| {
                let z: f64 = StandardNormal.sample(rng);
                (a + sigma * z).clamp(-1.0, 1.0)
            })
            .collect(),
        PolicyKind::Random => (0..env.spec().act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    }
}

/// Rolls out one episode, recording states/actions in `f32` and the true rewards.
pub fn rollout(
    env: &Env,
    mut policy: impl FnMut(&[f64], &mut RngStream) -> Vec<f64>,
    id: u64,
    reset_seed: u64,
    rng: &mut RngStream,
) -> Result<Episode, SimError> {
    let spec = env.spec();
    let mut state = env.reset(reset_seed);
    let mut states: Vec<f32> = state.obs.iter().map(|&x| x as f32).collect();
    let mut actions = Vec::with_capacity(spec.horizon * spec.act_dim);
    let mut rewards = Vec::with_capacity(spec.horizon);
    loop {
        let a = policy(&state.obs, rng);
        let out = env.step(&state, &a)?;
        actions.extend(a.iter().map(|&x| x as f32));
        rewards.push(out.reward as f32);
        states.extend(out.next.obs.iter().map(|&x| x as f32));
        state = out.next;
        if out.done {
            break;
        }
    }
    Ok(Episode::new(id, spec.obs_dim, spec.act_dim, states, actions, Some(rewards))?)
}

/// Generates episodes for `mix`, with ids `first_id..`, each with its own derived seeds.
pub fn generate_episodes(
    env: &Env,
    mix: &[(PolicyKind, usize)],
    seed: u64,
    first_id: u64,
) -> Result<Vec<Episode>, SimError> {
    if mix.iter().all(|&(_, c)| c == 0) {
        return Err(SimError::EmptyMix);
    }
    let mut out = Vec::new();
    let mut id = first_id;
    for &(kind, count) in mix {
        for _ in 0..count {
            let episode_seed = rng::derive_seed(seed, id);
            let mut rng = rng::stream(episode_seed, tags::BEHAVIOR);
            out.push(rollout(env, |obs, r| act(kind, env, obs, r), id, episode_seed, &mut rng)?);
            id += 1;
        }
    }
    Ok(out)
}

/// Formats a mix as `kind:count,...`.
pub fn mix_to_string(mix: &[(PolicyKind, usize)]) -> String {
    mix.iter().map(|(k, c)| format!("{k}:{c}")).collect::<Vec<_>>().join(",")
}

pub fn parse_mix(s: &str) -> Result<Vec<(PolicyKind, usize)>, SimError> {
    s.split(',')
        .map(|part| {
            let (k, c) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| SimError::UnknownPolicy(part.to_string()))?;
            let count = c.trim().parse().map_err(|_| SimError::UnknownPolicy(part.to_string()))?;
            Ok((k.trim().parse()?, count))
        })
        .collect()
}

/// A raw dataset rolled out per `mix`; rewards are kept, meta records the recipe.
pub fn generate_dataset(env: &Env, mix: &[(PolicyKind, usize)], seed: u64) -> Result<Dataset, SimError> {
    let spec = env.spec();
    let mut d = Dataset::from_episodes(spec.obs_dim, spec.act_dim, generate_episodes(env, mix, seed, 0)?)?;
    d.meta.insert("env".into(), spec.name.into());
    d.meta.insert("seed".into(), seed.to_string());
    d.meta.insert("mix".into(), mix_to_string(mix));
    Ok(d)
}

/// Sum of the ground-truth rewards of an episode.
pub fn episodic_return(e: &Episode) -> Result<f64, DataError> {
    e.gt_rewards()
        .map(|r| r.iter().map(|&x| x as f64).sum())
        .ok_or(DataError::MissingGroundTruth { id: e.id() })
}
