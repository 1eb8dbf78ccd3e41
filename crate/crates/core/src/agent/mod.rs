//! DDPG agent that chooses the loop-loss weight during training.
//!
//! The actor maps the state `(progress, smoothed loop loss)` to an action in
//! `[0, 1]`, which [`CurriculumState::weight`] turns into the loop weight.

mod curriculum;
mod ddpg;
mod mlp;
mod replay;

use thiserror::Error;

pub use curriculum::{curriculum_weight, CurriculumState};
pub use ddpg::{DdpgAgent, DdpgConfig, NoiseKind, UpdateStats, CHECKPOINT_VERSION};
pub use mlp::{Activation, Adam, Layer, Mlp, MlpGrads, Trace, MAX_HIDDEN_WIDTH, MAX_LAYERS};
pub use replay::{ReplayBuffer, Transition, DEFAULT_CAPACITY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("input has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("replay buffer holds {available} transitions, need {needed}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("smoothed loss read before the first update")]
    UninitializedEma,
    #[error("invalid network architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
