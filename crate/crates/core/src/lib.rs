//! Computational core for loop-closure-aware fine-tuning of a visual odometry
//! model with an RL-scheduled loop-loss weight.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`liegroup`]: SE(3) poses, twists, exp/log maps and TUM trajectory lines.
//! - [`losses`]: Huber, loop, pose and flow losses with analytic gradients.
//! - [`agent`]: DDPG agent (hand-written MLPs, replay buffer, curriculum state).
//! - [`loopdb`]: offline loop-pair database (VLAD retrieval, epipolar
//!   verification) and the synthetic scene generator.
//! - [`trainer`]: surrogate fine-tuning harness driven by the agent.
//! - [`eval`]: ATE with Umeyama alignment, median-of-runs protocol, cost model.

pub mod agent;
pub mod eval;
pub mod liegroup;
pub mod loopdb;
pub mod losses;
pub mod trainer;

pub use liegroup::{Pose, Rotation, Twist};
