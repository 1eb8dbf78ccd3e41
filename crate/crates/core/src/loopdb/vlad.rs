use serde::{Deserialize, Serialize};

use super::{normalize, Codebook, LocalFeature, LoopDbError};

/// Blocks whose residual sum is below this fraction of the summed residual
/// norms are treated as empty rather than normalized noise.
const CANCELLATION_FLOOR: f64 = 1e-9;

/// Unit-length VLAD vector; frames whose residuals cancel to zero are kept
/// with `valid = false` and never retrieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub vector: Vec<f64>,
    pub valid: bool,
}

impl GlobalDescriptor {
    pub fn invalid(dim: usize) -> Self {
        GlobalDescriptor { vector: vec![0.0; dim], valid: false }
    }
}

/// Hard-assignment VLAD: residuals to the nearest center are summed per
/// center, each block is L2-normalized, then the whole vector.
pub fn vlad_descriptor(features: &[LocalFeature], codebook: &Codebook) -> Result<GlobalDescriptor, LoopDbError> {
    if features.is_empty() {
        return Err(LoopDbError::EmptyFrame);
    }
    let dim = codebook.dim();
    let mut v = vec![0.0; codebook.k() * dim];
    // Sum of residual norms per block, to spot sums that cancelled to rounding noise.
    let mut mass = vec![0.0; codebook.k()];
    for f in features {
        if f.descriptor.len() != dim {
            return Err(LoopDbError::DimensionMismatch { expected: dim, got: f.descriptor.len() });
        }
        let c = codebook.nearest(&f.descriptor);
        let block = &mut v[c * dim..(c + 1) * dim];
        let mut r2 = 0.0;
        for ((b, x), m) in block.iter_mut().zip(&f.descriptor).zip(&codebook.centers()[c]) {
            *b += x - m;
            r2 += (x - m) * (x - m);
        }
        mass[c] += r2.sqrt();
    }
    for (block, m) in v.chunks_mut(dim).zip(&mass) {
        if normalize(block) <= CANCELLATION_FLOOR * m {
            block.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let n = normalize(&mut v);
    Ok(GlobalDescriptor { valid: n > 0.0, vector: v })
}

pub fn cosine_similarity(a: &GlobalDescriptor, b: &GlobalDescriptor) -> f64 {
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    let na: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub threshold: f64,
    /// Oldest eligible frame is `query - window`.
    pub window: usize,
    /// Frames newer than `query - exclusion` are never candidates.
    pub exclusion: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams { threshold: 0.75, window: 2000, exclusion: 100 }
    }
}

/// Frames `f` with `query - window <= f < query - exclusion` whose cosine
/// similarity to the query reaches the threshold, best first (ties go to the
/// smaller index). `index[f]` is the descriptor of frame `f`.
pub fn retrieve_candidates(
    index: &[GlobalDescriptor],
    query_index: usize,
    query: &GlobalDescriptor,
    params: &RetrievalParams,
) -> Vec<(usize, f64)> {
    if !query.valid || query_index <= params.exclusion {
        return Vec::new();
    }
    let lo = query_index.saturating_sub(params.window);
    let hi = (query_index - params.exclusion).min(index.len());
    let mut out: Vec<(usize, f64)> = (lo..hi)
        .filter(|&f| index[f].valid)
        .map(|f| (f, cosine_similarity(&index[f], query)))
        .filter(|&(_, s)| s >= params.threshold)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn cb() -> Codebook {
        Codebook::from_centers(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap()
    }

    fn feat(d: [f64; 3]) -> LocalFeature {
        LocalFeature::new(Vector2::zeros(), d.to_vec())
    }

    fn desc(v: Vec<f64>) -> GlobalDescriptor {
        GlobalDescriptor { vector: v, valid: true }
    }

    #[test]
    fn features_at_centers_give_invalid_descriptor() {
        let g = vlad_descriptor(&[feat([1.0, 0.0, 0.0]), feat([0.0, 1.0, 0.0])], &cb()).unwrap();
        assert!(!g.valid);
        assert!(g.vector.iter().all(|&x| x == 0.0));
        assert_eq!(vlad_descriptor(&[], &cb()), Err(LoopDbError::EmptyFrame));
    }

    #[test]
    fn single_feature_residual_lands_in_its_block() {
        let f = feat([0.8, 0.6, 0.0]);
        let g = vlad_descriptor(&[f.clone()], &cb()).unwrap();
        let r = [f.descriptor[0] - 1.0, f.descriptor[1], 0.0];
        let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let expected = [r[0] / n, r[1] / n, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in g.vector.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn permutation_invariance_and_self_similarity() {
        let fs = vec![feat([0.9, 0.1, 0.2]), feat([0.1, 0.9, -0.3]), feat([0.5, 0.2, 0.7]), feat([0.3, 0.8, 0.1])];
        let mut rev = fs.clone();
        rev.reverse();
        let a = vlad_descriptor(&fs, &cb()).unwrap();
        let b = vlad_descriptor(&rev, &cb()).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((cosine_similarity(&a, &b) - 1.0).abs() < 1e-12);
        let norm: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieval_window_bounds() {
        let params = RetrievalParams { threshold: 0.75, window: 10, exclusion: 3 };
        let q = desc(vec![1.0, 0.0]);
        let index: Vec<GlobalDescriptor> = (0..20).map(|_| q.clone()).collect();
        let got: Vec<usize> = retrieve_candidates(&index, 15, &q, &params).iter().map(|c| c.0).collect();
        // 15 - 10 = 5 is the oldest eligible frame, 15 - 3 = 12 the first excluded.
        assert_eq!(got, vec![5, 6, 7, 8, 9, 10, 11]);
        let got = retrieve_candidates(&index, 16, &q, &params);
        assert!(got.iter().all(|c| c.0 >= 6));
    }

    #[test]
    fn retrieval_orders_by_similarity_then_index() {
        let params = RetrievalParams { threshold: 0.75, window: 100, exclusion: 0 };
        let q = desc(vec![1.0, 0.0]);
        let s = 0.8f64;
        let index = vec![
            desc(vec![s, (1.0 - s * s).sqrt()]),
            desc(vec![1.0, 0.0]),
            desc(vec![0.0, 1.0]),
            desc(vec![s, -(1.0 - s * s).sqrt()]),
            GlobalDescriptor::invalid(2),
        ];
        let got = retrieve_candidates(&index, 5, &q, &params);
        assert_eq!(got.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 0, 3]);
        assert_eq!(got[0].1, 1.0);
    }
}
