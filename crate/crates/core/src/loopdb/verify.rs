//! Descriptor matching plus RANSAC over the normalized 8-point fundamental
//! matrix.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sq_dist, LocalFeature};

const SAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    pub min_inliers: usize,
    /// Lowe ratio between nearest and second-nearest descriptor distance.
    pub ratio: f64,
    pub max_iters: usize,
    /// Inlier threshold on the Sampson distance, pixels.
    pub sampson_px: f64,
    /// Target probability of drawing one all-inlier sample; drives early stop.
    pub confidence: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams { min_inliers: 30, ratio: 0.8, max_iters: 2000, sampson_px: 1.0, confidence: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub matches: usize,
    pub inliers: usize,
    pub accepted: bool,
    pub reason: Option<String>,
}

impl Verification {
    fn rejected(matches: usize, reason: String) -> Self {
        Verification { matches, inliers: 0, accepted: false, reason: Some(reason) }
    }
}

fn two_nearest(x: &[f64], set: &[LocalFeature]) -> (usize, f64, f64) {
    let (mut bi, mut b1, mut b2) = (0, f64::INFINITY, f64::INFINITY);
    for (i, f) in set.iter().enumerate() {
        let d = sq_dist(x, &f.descriptor);
        if d < b1 {
            b2 = b1;
            b1 = d;
            bi = i;
        } else if d < b2 {
            b2 = d;
        }
    }
    (bi, b1, b2)
}

/// Mutual nearest neighbours that also pass the ratio test in the forward
/// direction.
pub fn match_features(fi: &[LocalFeature], fj: &[LocalFeature], ratio: f64) -> Vec<(usize, usize)> {
    let backward: Vec<usize> = fj.iter().map(|f| two_nearest(&f.descriptor, fi).0).collect();
    fi.iter()
        .enumerate()
        .filter_map(|(a, f)| {
            let (b, d1, d2) = two_nearest(&f.descriptor, fj);
            let passes = d1.sqrt() < ratio * d2.sqrt() || d1 == 0.0 && d2 > 0.0;
            (passes && backward[b] == a).then_some((a, b))
        })
        .collect()
}

/// Similarity taking points to zero centroid and mean distance sqrt(2).
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector3<f64> {
    t * Vector3::new(p.x, p.y, 1.0)
}

/// Least-squares `F` (rank 2) with `x2^T F x1 = 0` over homogeneous points.
fn eight_point(x1: &[Vector3<f64>], x2: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let rows = x1.len().max(9);
    let mut a = DMatrix::zeros(rows, 9);
    for (r, (p, q)) in x1.iter().zip(x2).enumerate() {
        for i in 0..3 {
            for j in 0..3 {
                a[(r, 3 * i + j)] = q[i] * p[j];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let f = v_t.row(min_idx);
    let f = Matrix3::from_row_slice(&[f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]]);
    let svd = f.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let (min_idx, _) = s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    s[min_idx] = 0.0;
    Some(u * Matrix3::from_diagonal(&s) * v_t)
}

/// Squared Sampson distance of a correspondence under `f`.
fn sampson_sq(f: &Matrix3<f64>, p: &Vector2<f64>, q: &Vector2<f64>) -> f64 {
    let x1 = Vector3::new(p.x, p.y, 1.0);
    let x2 = Vector3::new(q.x, q.y, 1.0);
    let l2 = f * x1;
    let l1 = f.transpose() * x2;
    let e = x2.dot(&l2);
    let den = l2.x * l2.x + l2.y * l2.y + l1.x * l1.x + l1.y * l1.y;
    if den <= 0.0 {
        return if e == 0.0 { 0.0 } else { f64::INFINITY };
    }
    e * e / den
}

fn inlier_mask(f: &Matrix3<f64>, p1: &[Vector2<f64>], p2: &[Vector2<f64>], thresh_sq: f64) -> Vec<bool> {
    p1.iter().zip(p2).map(|(p, q)| sampson_sq(f, p, q) < thresh_sq).collect()
}

fn fit(idx: &[usize], n1: &[Vector3<f64>], n2: &[Vector3<f64>], t1: &Matrix3<f64>, t2: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let a: Vec<Vector3<f64>> = idx.iter().map(|&i| n1[i]).collect();
    let b: Vec<Vector3<f64>> = idx.iter().map(|&i| n2[i]).collect();
    eight_point(&a, &b).map(|fn_| t2.transpose() * fn_ * t1)
}

/// Matches two frames and counts epipolar inliers of the best RANSAC model.
pub fn geometric_verify(fi: &[LocalFeature], fj: &[LocalFeature], params: &VerifyParams, seed: u64) -> Verification {
    if fi.len() < SAMPLE || fj.len() < SAMPLE {
        return Verification::rejected(0, format!("too few features ({} and {})", fi.len(), fj.len()));
    }
    let matches = match_features(fi, fj, params.ratio);
    let m = matches.len();
    if m < SAMPLE {
        return Verification::rejected(m, format!("only {m} descriptor matches"));
    }
    let p1: Vec<Vector2<f64>> = matches.iter().map(|&(a, _)| fi[a].position).collect();
    let p2: Vec<Vector2<f64>> = matches.iter().map(|&(_, b)| fj[b].position).collect();
    let t1 = hartley(&p1);
    let t2 = hartley(&p2);
    let n1: Vec<Vector3<f64>> = p1.iter().map(|p| apply(&t1, p)).collect();
    let n2: Vec<Vector3<f64>> = p2.iter().map(|p| apply(&t2, p)).collect();
    let thresh_sq = params.sampson_px * params.sampson_px;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0usize;
    let mut needed = params.max_iters;
    let mut it = 0;
    while it < needed.min(params.max_iters) {
        it += 1;
        let sample = rand::seq::index::sample(&mut rng, m, SAMPLE).into_vec();
        let Some(f) = fit(&sample, &n1, &n2, &t1, &t2) else { continue };
        let mask = inlier_mask(&f, &p1, &p2, thresh_sq);
        let count = mask.iter().filter(|&&b| b).count();
        if count > best_count {
            best_count = count;
            best = Some(mask);
            let w = count as f64 / m as f64;
            let miss = 1.0 - w.powi(SAMPLE as i32);
            needed = if miss <= 0.0 {
                0
            } else {
                ((1.0 - params.confidence).ln() / miss.ln()).ceil().max(0.0) as usize
            };
        }
    }

    // Polish on the consensus set and keep whichever model explains more.
    if let Some(mask) = &best {
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        if idx.len() >= SAMPLE {
            if let Some(f) = fit(&idx, &n1, &n2, &t1, &t2) {
                let refined = inlier_mask(&f, &p1, &p2, thresh_sq).iter().filter(|&&b| b).count();
                best_count = best_count.max(refined);
            }
        }
    }

    let accepted = best_count >= params.min_inliers;
    Verification {
        matches: m,
        inliers: best_count,
        accepted,
        reason: (!accepted).then(|| format!("{best_count} inliers < {}", params.min_inliers)),
    }
}
