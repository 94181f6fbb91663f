//! Offline reinforced imitation learning at desk scale.
//!
//! A reward model is learned by contrasting demonstration states against
//! unlabeled logged states, every logged transition is annotated with that
//! reward, and a distributional critic-regularized-regression agent is
//! trained entirely offline. Behavior-cloning and flat-reward baselines and
//! the dataset ablation protocols live alongside it.
//!
//! Module map:
//! - [`trajdata`]: episodes, datasets, the demonstration/unlabeled split, sampling, file format.
//! - [`worldsim`]: toy control environments, behavior policies, dataset generation.
//! - [`diffcore`]: small MLPs with exact gradients, output heads, Adam, gradient checks.
//! - [`rewardlearn`]: reward losses (cross-entropy, positive-unlabeled, TRAIL), annotation.
//! - [`crragent`]: distributional critic, indicator-weighted policy regression, BC, evaluation.
//! - [`lab`]: run configuration, experiment orchestration, evaluation protocol, CSV reports.

pub mod crragent;
pub mod diffcore;
pub mod lab;
pub mod rewardlearn;
pub mod rng;
pub mod trajdata;
pub mod worldsim;

pub use crragent::{AgentBundle, AgentConfig, GroundTruth, MetricsRecord, TrainMethod, Trainer};
pub use diffcore::{AdamConfig, Approximator, GmmOutput, Head, Support, Topology};
pub use lab::{AblationSpec, RunConfig};
pub use rewardlearn::{RewardConfig, RewardMode, RewardModel};
pub use rng::RngStream;
pub use trajdata::{Dataset, Episode, Origin, Source, SplitDataset, SuccessRule, TransitionBatch};
pub use worldsim::{BehaviorPolicy, Env, EnvSpec, PolicyKind};
