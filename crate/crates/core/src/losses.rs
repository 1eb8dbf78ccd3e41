//! Training losses over predicted poses: Huber, loop closure, relative pose
//! and a reprojection-based flow surrogate, each with an analytic gradient.
//!
//! Gradients are taken with respect to a right-multiplied twist perturbation
//! of every predicted pose, `P_k <- P_k * exp(eps_k)`, and returned as one
//! [`Twist`] per prediction in `(rho, omega)` order.

use log::warn;
use nalgebra::{Matrix2x3, Matrix3, Matrix3x6, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{hat, Pose, Twist, SMALL_ANGLE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    /// No loop constraints in the window; the loop term is defined as zero.
    #[error("no loop constraints in window")]
    EmptyConstraints,
    #[error("length mismatch: {predictions} predictions vs {ground_truth} ground-truth poses")]
    LengthMismatch { predictions: usize, ground_truth: usize },
    #[error("need at least {needed} poses, got {got}")]
    TooFewPoses { needed: usize, got: usize },
    #[error("no landmark is co-visible in any consecutive frame pair")]
    NoVisibleLandmarks,
    #[error("constraint index {index} outside prediction window of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("Huber delta must be positive and finite, got {0}")]
    InvalidDelta(f64),
    #[error("loss weights must be nonnegative and finite")]
    InvalidWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberParam {
    delta: f64,
}

impl HuberParam {
    pub fn new(delta: f64) -> Result<Self, LossError> {
        if delta > 0.0 && delta.is_finite() {
            Ok(HuberParam { delta })
        } else {
            Err(LossError::InvalidDelta(delta))
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for HuberParam {
    fn default() -> Self {
        HuberParam { delta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub s_p: f64,
    pub s_f: f64,
    pub w_loop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { s_p: 10.0, s_f: 0.1, w_loop: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if ok(self.s_p) && ok(self.s_f) && ok(self.w_loop) {
            Ok(())
        } else {
            Err(LossError::InvalidWeights)
        }
    }
}

/// Pulls prediction `pred_index` (window-relative) towards `target_pose`, the
/// ground-truth pose of its loop partner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConstraint {
    pub pred_index: usize,
    pub target_pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pose: f64,
    pub flow: f64,
    pub loop_closure: f64,
    pub total: f64,
}

pub fn huber(x: f64, delta: HuberParam) -> f64 {
    let d = delta.delta;
    let a = x.abs();
    if a <= d {
        0.5 * x * x
    } else {
        d * a - 0.5 * d * d
    }
}

pub fn huber_grad(x: f64, delta: HuberParam) -> f64 {
    let d = delta.delta;
    if x.abs() <= d {
        x
    } else {
        d * x.signum()
    }
}

/// `huber_grad(n) / n` for a norm `n >= 0`, finite at `n = 0`.
fn huber_weight(n: f64, delta: HuberParam) -> f64 {
    if n <= delta.delta {
        1.0
    } else {
        delta.delta / n
    }
}

/// Combines the three terms: `s_f * flow + s_p * pose + w_loop * loop`.
pub fn total_loss(pose: f64, flow: f64, loop_closure: f64, weights: &LossWeights) -> LossBreakdown {
    let total = weights.s_f * flow + weights.s_p * pose + weights.w_loop * loop_closure;
    LossBreakdown { pose, flow, loop_closure, total }
}

/// Inverse of the SO(3) left Jacobian for rotation vector `omega`.
fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Off-diagonal block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    // The closed forms cancel catastrophically for small angles; below this
    // the truncated series is accurate to well under 1e-12.
    let (c1, c2, c3) = if theta < 1e-2 {
        (1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let r = hat(rho);
    let w = hat(omega);
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    r * 0.5 + (wr + rw + wrw) * c1 + (w * wr + rw * w - wrw * 3.0) * c2 + (wrw * w + w * wrw) * c3
}

/// Inverse of the SE(3) left Jacobian, `(rho, omega)` ordering. Satisfies
/// `log(exp(d) * exp(xi)) ~= xi + J^-1(xi) d` for small `d`.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jw_inv = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q_block(&xi.rho, &xi.omega);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jw_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jw_inv * q * jw_inv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jw_inv);
    out
}

/// Robust residual of one relative error `e`: value and `d value / d xi`
/// (in the tangent space of `e`'s left perturbation). Near-pi residuals are
/// clamped to `huber(pi)` with zero gradient.
fn residual_term(e: &Pose, delta: HuberParam) -> (f64, Vector6<f64>, bool) {
    match e.log() {
        Ok(xi) => {
            let n = xi.norm();
            let v = huber(n, delta);
            let g = se3_left_jacobian_inv(&xi).transpose() * xi.to_vector() * huber_weight(n, delta);
            (v, g, false)
        }
        Err(err) => {
            warn!("clamping residual: {err}");
            (huber(std::f64::consts::PI, delta), Vector6::zeros(), true)
        }
    }
}

fn check_constraints(predictions: &[Pose], constraints: &[LoopConstraint]) -> Result<(), LossError> {
    if constraints.is_empty() {
        return Err(LossError::EmptyConstraints);
    }
    for c in constraints {
        if c.pred_index >= predictions.len() {
            return Err(LossError::IndexOutOfRange { index: c.pred_index, len: predictions.len() });
        }
    }
    Ok(())
}

/// Loop loss value and per-prediction gradients in one pass.
pub fn loop_loss_with_grad(
    predictions: &[Pose],
    constraints: &[LoopConstraint],
    delta: HuberParam,
) -> Result<(f64, Vec<Twist>), LossError> {
    check_constraints(predictions, constraints)?;
    let n = constraints.len() as f64;
    let mut value = 0.0;
    let mut grads = vec![Vector6::zeros(); predictions.len()];
    for c in constraints {
        let e = predictions[c.pred_index].inverse().compose(&c.target_pose);
        let (v, g, _) = residual_term(&e, delta);
        value += v;
        // (P exp(eps))^-1 G = exp(-eps) P^-1 G
        grads[c.pred_index] -= g;
    }
    let grads = grads.iter().map(|g| Twist::from_vector(&(g / n))).collect();
    Ok((value / n, grads))
}

/// Mean Huber penalty of `log(P_i^-1 G_j)` over all constraints.
pub fn loop_loss(
    predictions: &[Pose],
    constraints: &[LoopConstraint],
    delta: HuberParam,
) -> Result<f64, LossError> {
    check_constraints(predictions, constraints)?;
    let sum: f64 = constraints
        .iter()
        .map(|c| residual_term(&predictions[c.pred_index].inverse().compose(&c.target_pose), delta).0)
        .sum();
    Ok(sum / constraints.len() as f64)
}

pub fn loop_loss_grad(
    predictions: &[Pose],
    constraints: &[LoopConstraint],
    delta: HuberParam,
) -> Result<Vec<Twist>, LossError> {
    loop_loss_with_grad(predictions, constraints, delta).map(|(_, g)| g)
}

fn check_pair_lengths(predictions: &[Pose], ground_truth: &[Pose]) -> Result<(), LossError> {
    if predictions.len() != ground_truth.len() {
        return Err(LossError::LengthMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    if predictions.len() < 2 {
        return Err(LossError::TooFewPoses { needed: 2, got: predictions.len() });
    }
    Ok(())
}

/// Relative-motion supervision: mean over consecutive pairs of the Huber
/// penalty on the gap between predicted and ground-truth frame-to-frame motion.
pub fn pose_loss_with_grad(
    predictions: &[Pose],
    ground_truth: &[Pose],
    delta: HuberParam,
) -> Result<(f64, Vec<Twist>), LossError> {
    check_pair_lengths(predictions, ground_truth)?;
    let m = (predictions.len() - 1) as f64;
    let mut value = 0.0;
    let mut grads = vec![Vector6::zeros(); predictions.len()];
    for k in 0..predictions.len() - 1 {
        let a = predictions[k + 1].inverse().compose(&predictions[k]);
        let d_gt = ground_truth[k].inverse().compose(&ground_truth[k + 1]);
        let e = a.compose(&d_gt);
        let (v, g, _) = residual_term(&e, delta);
        value += v;
        // E = exp(-eps) A D  for the later frame; E = exp(Ad_A eps) A D for the earlier.
        grads[k + 1] -= g;
        grads[k] += a.adjoint().transpose() * g;
    }
    let grads = grads.iter().map(|g| Twist::from_vector(&(g / m))).collect();
    Ok((value / m, grads))
}

pub fn pose_loss(predictions: &[Pose], ground_truth: &[Pose], delta: HuberParam) -> Result<f64, LossError> {
    check_pair_lengths(predictions, ground_truth)?;
    let m = (predictions.len() - 1) as f64;
    let mut value = 0.0;
    for k in 0..predictions.len() - 1 {
        let a = predictions[k + 1].inverse().compose(&predictions[k]);
        let d_gt = ground_truth[k].inverse().compose(&ground_truth[k + 1]);
        value += residual_term(&a.compose(&d_gt), delta).0;
    }
    Ok(value / m)
}

/// Window of a scene as seen by the flow surrogate. `visible[k]` lists the
/// (sorted) landmark indices observed in frame `k`; poses map camera to world.
#[derive(Debug, Clone, Copy)]
pub struct FlowView<'a> {
    pub ground_truth: &'a [Pose],
    pub landmarks: &'a [Vector3<f64>],
    pub visible: &'a [Vec<usize>],
}

/// Points closer than this to the predicted image plane are dropped.
const MIN_DEPTH: f64 = 1e-3;

fn sorted_intersection<'a>(a: &'a [usize], b: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    let (mut i, mut j) = (0, 0);
    std::iter::from_fn(move || {
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let v = a[i];
                    i += 1;
                    j += 1;
                    return Some(v);
                }
            }
        }
        None
    })
}

fn project(y: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(y.x / y.z, y.y / y.z)
}

fn flow_impl(
    predictions: &[Pose],
    view: &FlowView<'_>,
    want_grad: bool,
) -> Result<(f64, Vec<Vector6<f64>>), LossError> {
    check_pair_lengths(predictions, view.ground_truth)?;
    if view.visible.len() != predictions.len() {
        return Err(LossError::LengthMismatch {
            predictions: predictions.len(),
            ground_truth: view.visible.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads = vec![Vector6::zeros(); if want_grad { predictions.len() } else { 0 }];
    for k in 0..predictions.len() - 1 {
        let gk_inv = view.ground_truth[k].inverse();
        let gk1_inv = view.ground_truth[k + 1].inverse();
        let a = predictions[k + 1].inverse().compose(&predictions[k]);
        let ra = a.rotation.matrix();
        for l in sorted_intersection(&view.visible[k], &view.visible[k + 1]) {
            let xw = view.landmarks[l];
            let xk = gk_inv.transform_point(&xw);
            let y_gt = gk1_inv.transform_point(&xw);
            let y = a.transform_point(&xk);
            if y.z < MIN_DEPTH || y_gt.z < MIN_DEPTH {
                continue;
            }
            let r = project(&y) - project(&y_gt);
            sum += r.norm_squared();
            count += 1;
            if want_grad {
                let iz = 1.0 / y.z;
                let dpi = Matrix2x3::new(iz, 0.0, -y.x * iz * iz, 0.0, iz, -y.y * iz * iz);
                let gy = dpi.transpose() * r * 2.0;
                let mut j_next = Matrix3x6::zeros();
                j_next.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
                j_next.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&y));
                let mut j_prev = Matrix3x6::zeros();
                j_prev.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra);
                j_prev.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ra * hat(&xk)));
                grads[k + 1] += j_next.transpose() * gy;
                grads[k] += j_prev.transpose() * gy;
            }
        }
    }
    if count == 0 {
        return Err(LossError::NoVisibleLandmarks);
    }
    let c = count as f64;
    for g in grads.iter_mut() {
        *g /= c;
    }
    Ok((sum / c, grads))
}

/// Mean squared difference (normalized image units) between landmark
/// positions transferred into frame `k+1` by the predicted versus the
/// ground-truth relative motion, over all co-visible landmarks.
pub fn flow_loss(predictions: &[Pose], view: &FlowView<'_>) -> Result<f64, LossError> {
    flow_impl(predictions, view, false).map(|(v, _)| v)
}

pub fn flow_loss_with_grad(predictions: &[Pose], view: &FlowView<'_>) -> Result<(f64, Vec<Twist>), LossError> {
    let (v, g) = flow_impl(predictions, view, true)?;
    Ok((v, g.iter().map(Twist::from_vector).collect()))
}
