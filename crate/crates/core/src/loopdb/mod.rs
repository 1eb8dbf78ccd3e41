//! Offline loop-pair database: VLAD global descriptors, windowed retrieval,
//! epipolar verification, and the synthetic scene generator that provides
//! ground-truth revisits.

mod codebook;
mod database;
mod features;
mod scene;
mod verify;
mod vlad;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codebook::{build_codebook, Codebook};
pub use database::{
    build_database, BuildParams, BuildSummary, LoopDatabase, LoopPair, Provenance, SceneFeatures,
};
pub use features::{parse_features, write_features};
pub use scene::{benchmark_corpus, circle_scene, drift_scene, DRIFT_SCENE_SCALE, generate_scene, Camera, SceneSpec, Shape, SyntheticScene, BENCHMARK_STEP};
pub use verify::{geometric_verify, Verification, VerifyParams};
pub use vlad::{cosine_similarity, retrieve_candidates, vlad_descriptor, GlobalDescriptor, RetrievalParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopDbError {
    #[error("need at least {needed} features, got {got}")]
    TooFewFeatures { needed: usize, got: usize },
    #[error("frame has no features")]
    EmptyFrame,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("descriptor dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("degenerate codebook: {0}")]
    DegenerateCodebook(String),
}

/// Keypoint position (pixels) with a unit-length descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFeature {
    pub position: Vector2<f64>,
    pub descriptor: Vec<f64>,
}

impl LocalFeature {
    /// Normalizes `descriptor` to unit length (a zero descriptor is kept as is).
    pub fn new(position: Vector2<f64>, mut descriptor: Vec<f64>) -> Self {
        normalize(&mut descriptor);
        LocalFeature { position, descriptor }
    }
}

pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// SplitMix64 finalizer, used to derive independent per-task seeds.
pub(crate) fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of a string; stable across platforms and runs.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}
