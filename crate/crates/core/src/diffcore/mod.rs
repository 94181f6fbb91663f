//! Minimal differentiable core: tanh MLPs with exact reverse-mode gradients,
//! the three output heads, Adam, finite-difference checks and checkpoints.
//!
//! All arithmetic is `f64`.

mod adam;
mod approx;
mod checkpoint;
mod gradcheck;
mod heads;
mod mlp;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use approx::{Approximator, TargetCopy};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_coords, probe_coords, relative_error};
pub use heads::{
    categorical_mean, gmm_log_prob, gmm_log_prob_raw_grad, gmm_sample, log_sum_exp, normal_pdf, sigmoid,
    softmax, softplus, GmmOutput, Head, HeadOutput, Support,
};
pub use mlp::{Tape, Topology};

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("bad descriptor {0:?}")]
    Descriptor(String),
    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
