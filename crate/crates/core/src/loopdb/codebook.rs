use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sq_dist, LoopDbError};

const MAX_ITERS: usize = 100;
const MOVE_TOL: f64 = 1e-6;

/// Visual-word centers for VLAD aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    centers: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn from_centers(centers: Vec<Vec<f64>>) -> Result<Self, LoopDbError> {
        let dim = centers.first().map(|c| c.len()).unwrap_or(0);
        if centers.is_empty() || dim == 0 {
            return Err(LoopDbError::DegenerateCodebook("no centers".into()));
        }
        if let Some(c) = centers.iter().find(|c| c.len() != dim) {
            return Err(LoopDbError::DimensionMismatch { expected: dim, got: c.len() });
        }
        for a in 0..centers.len() {
            for b in a + 1..centers.len() {
                if sq_dist(&centers[a], &centers[b]).sqrt() <= 1e-6 {
                    return Err(LoopDbError::DegenerateCodebook(format!("centers {a} and {b} coincide")));
                }
            }
        }
        Ok(Codebook { centers })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Index of the nearest center (lowest index on ties).
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centers, x).0
    }
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus(data: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].to_vec()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[pick].to_vec();
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// k-means++ seeding followed by Lloyd iterations (at most 100, or until no
/// center moves more than 1e-6). Empty clusters keep their previous center.
pub fn build_codebook(features: &[&[f64]], k: usize, seed: u64) -> Result<Codebook, LoopDbError> {
    if k == 0 || features.len() < k {
        return Err(LoopDbError::TooFewFeatures { needed: k.max(1), got: features.len() });
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(LoopDbError::DimensionMismatch { expected: dim, got: f.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(features, k, &mut rng);
    for _ in 0..MAX_ITERS {
        let assign: Vec<usize> = features.par_iter().map(|x| nearest(&centers, x).0).collect();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in features.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.iter()) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let n = counts[c] as f64;
            let new: Vec<f64> = sums[c].iter().map(|s| s / n).collect();
            moved = moved.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if moved < MOVE_TOL {
            break;
        }
    }
    Codebook::from_centers(centers)
}
