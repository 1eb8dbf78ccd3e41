//! Trajectory evaluation: Umeyama alignment, absolute trajectory error, the
//! median-of-runs experiment protocol and the pre-computation cost model.

use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::Pose;
use crate::loopdb::{LoopDatabase, SyntheticScene};
use crate::trainer::{finetune, TrainError, TrainerConfig};

/// Maximum timestamp gap, seconds, for associating two trajectory files.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

pub const DESCRIPTOR_FLOPS: f64 = 1.2e6;
pub const FEATURE_FLOPS: f64 = 3.5e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectories differ in length: {est} estimated vs {gt} ground-truth poses")]
    LengthMismatch { est: usize, gt: usize },
    #[error("need at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("timestamps and poses differ in length ({timestamps} vs {poses})")]
    MalformedTrajectory { timestamps: usize, poses: usize },
    #[error("timestamps must be strictly increasing (index {0})")]
    NonIncreasingTimestamps(usize),
    #[error("only {matches} timestamps associate within tolerance; need 3")]
    AssociationTooSparse { matches: usize },
    #[error("run count must be odd and positive, got {0}")]
    InvalidRunCount(usize),
    #[error("only {completed} of {runs} runs completed; need at least 3")]
    TooFewCompletedRuns { completed: usize, runs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Rigid,
    Similarity,
}

impl FromStr for AlignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rigid" => Ok(AlignMode::Rigid),
            "sim" | "similarity" => Ok(AlignMode::Similarity),
            other => Err(format!("unknown alignment '{other}' (expected rigid or sim)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self, EvalError> {
        if timestamps.len() != poses.len() {
            return Err(EvalError::MalformedTrajectory { timestamps: timestamps.len(), poses: poses.len() });
        }
        if let Some(k) = (1..timestamps.len()).find(|&k| !(timestamps[k] > timestamps[k - 1])) {
            return Err(EvalError::NonIncreasingTimestamps(k));
        }
        Ok(Trajectory { timestamps, poses })
    }

    pub fn from_stamped(stamped: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        let (t, p) = stamped.into_iter().unzip();
        Trajectory::new(t, p)
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

/// `gt ~ scale * rotation * est + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    /// Points (nearly) collinear or coincident: the rotation is not unique.
    pub degenerate: bool,
}

impl Alignment {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Closed-form least-squares alignment of `est` onto `gt` (Umeyama).
pub fn align(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignMode) -> Result<Alignment, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.len() < 3 {
        return Err(EvalError::TooFewPoses(est.len()));
    }
    let n = est.len() as f64;
    let mu_x = est.iter().sum::<Vector3<f64>>() / n;
    let mu_y = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in est.iter().zip(gt) {
        let dx = x - mu_x;
        cov += (y - mu_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let d = svd.singular_values;
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // The smallest singular value absorbs the reflection.
        let (imin, _) = d.argmin();
        s[(imin, imin)] = -1.0;
    }
    let rotation = u * s * v_t;

    let mut sorted = [d[0], d[1], d[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let degenerate = var_x <= f64::EPSILON || sorted[1] <= 1e-12 * sorted[0].max(f64::MIN_POSITIVE);

    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::Similarity if var_x > 0.0 => (d.component_mul(&s.diagonal())).sum() / var_x,
        AlignMode::Similarity => 1.0,
    };
    let translation = mu_y - scale * rotation * mu_x;
    Ok(Alignment { rotation, translation, scale, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rmse: f64,
    pub alignment: AlignMode,
    pub scale: f64,
    pub degenerate: bool,
    pub per_frame: Vec<f64>,
}

impl AteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// `frame,timestamp,error` rows; `timestamps` are those of the associated
    /// ground truth.
    pub fn per_frame_csv(&self, timestamps: &[f64]) -> String {
        let mut s = String::from("frame,timestamp,error\n");
        for (k, (e, t)) in self.per_frame.iter().zip(timestamps).enumerate() {
            writeln!(s, "{k},{t},{e}").unwrap();
        }
        s
    }
}

/// ATE over index-associated positions.
pub fn ate_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>], mode: AlignMode) -> Result<AteReport, EvalError> {
    let a = align(est, gt, mode)?;
    if a.degenerate {
        warn!("alignment is not unique (degenerate geometry)");
    }
    let per_frame: Vec<f64> = est.iter().zip(gt).map(|(x, y)| (y - a.apply(x)).norm()).collect();
    let rmse = (per_frame.iter().map(|e| e * e).sum::<f64>() / per_frame.len() as f64).sqrt();
    Ok(AteReport { rmse, alignment: mode, scale: a.scale, degenerate: a.degenerate, per_frame })
}

/// ATE of `est` against `gt`, associated by index.
pub fn ate(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<AteReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    ate_positions(&est.positions(), &gt.positions(), mode)
}

/// Pairs every ground-truth stamp with the nearest unused estimate stamp
/// within `tolerance` seconds; unmatched frames are dropped.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Result<(Trajectory, Trajectory), EvalError> {
    let te = est.timestamps();
    let mut pairs = Vec::new();
    let mut next = 0;
    for (g, &tg) in gt.timestamps().iter().enumerate() {
        // Both sequences are sorted, so the search start only moves forward.
        while next + 1 < te.len() && te[next + 1] <= tg {
            next += 1;
        }
        let best = [next, next + 1]
            .into_iter()
            .filter(|&k| k < te.len())
            .min_by(|&a, &b| (te[a] - tg).abs().total_cmp(&(te[b] - tg).abs()));
        if let Some(k) = best {
            if (te[k] - tg).abs() <= tolerance && pairs.last().is_none_or(|&(pk, _)| pk < k) {
                pairs.push((k, g));
            }
        }
    }
    if pairs.len() < 3 {
        return Err(EvalError::AssociationTooSparse { matches: pairs.len() });
    }
    let e = Trajectory::new(pairs.iter().map(|&(k, _)| te[k]).collect(), pairs.iter().map(|&(k, _)| est.poses()[k]).collect())?;
    let g = Trajectory::new(
        pairs.iter().map(|&(_, j)| gt.timestamps()[j]).collect(),
        pairs.iter().map(|&(_, j)| gt.poses()[j]).collect(),
    )?;
    Ok((e, g))
}

/// Outcome of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub report: Option<AteReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Seed of the run whose RMSE is the median.
    pub median_seed: u64,
    pub median: AteReport,
    pub completed: usize,
    pub runs: Vec<RunOutcome>,
}

/// Picks the median-RMSE run among completed runs (ties to the lower seed;
/// with an even count the lower middle). Needs at least three completed.
pub fn median_of_runs(runs: Vec<RunOutcome>) -> Result<ExperimentReport, EvalError> {
    let mut done: Vec<(f64, u64, &AteReport)> =
        runs.iter().filter_map(|r| r.report.as_ref().map(|a| (a.rmse, r.seed, a))).collect();
    if done.len() < 3 {
        return Err(EvalError::TooFewCompletedRuns { completed: done.len(), runs: runs.len() });
    }
    if done.len() < runs.len() {
        warn!("{} of {} runs failed; median over the rest", runs.len() - done.len(), runs.len());
    }
    done.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (value, _, _) = done[(done.len() - 1) / 2];
    // First in (rmse, seed) order, i.e. the lowest seed among equal values.
    let &(_, median_seed, median) = done.iter().find(|d| d.0 == value).expect("value taken from done");
    let (median, completed) = (median.clone(), done.len());
    Ok(ExperimentReport { median_seed, median, completed, runs })
}

/// Fine-tunes with seeds `config.seed .. config.seed + runs` (in parallel)
/// and reports the median final ATE.
pub fn run_experiment(
    scene: &SyntheticScene,
    database: &LoopDatabase,
    config: &TrainerConfig,
    runs: usize,
    mode: AlignMode,
) -> Result<ExperimentReport, EvalError> {
    if runs == 0 || runs % 2 == 0 {
        return Err(EvalError::InvalidRunCount(runs));
    }
    let gt = scene.poses.iter().map(|p| p.translation).collect::<Vec<_>>();
    let outcomes: Vec<RunOutcome> = (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let seed = config.seed.wrapping_add(k);
            let cfg = TrainerConfig { seed, ..config.clone() };
            let result = finetune(scene, database, &cfg).map_err(|e: TrainError| e.to_string()).and_then(|out| {
                let est: Vec<Vector3<f64>> = out.model.trajectory().iter().map(|p| p.translation).collect();
                ate_positions(&est, &gt, mode).map_err(|e| e.to_string())
            });
            match result {
                Ok(r) => RunOutcome { seed, report: Some(r), error: None },
                Err(e) => {
                    warn!("run with seed {seed} failed: {e}");
                    RunOutcome { seed, report: None, error: Some(e) }
                }
            }
        })
        .collect();
    median_of_runs(outcomes)
}

/// Offline pre-computation FLOPs: `frames * (descriptor_flops + feature_flops)`.
pub fn precompute_cost(frames: u64, descriptor_flops: f64, feature_flops: f64) -> f64 {
    frames as f64 * (descriptor_flops + feature_flops)
}

pub fn default_precompute_cost(frames: u64) -> f64 {
    precompute_cost(frames, DESCRIPTOR_FLOPS, FEATURE_FLOPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect()
    }

    #[test]
    fn recovers_planted_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 30);
        let r = Rotation::from_axis_angle(&Vector3::new(0.3, -0.5, 0.8).normalize(), 2.1).matrix();
        let t = Vector3::new(1.0, -2.0, 0.5);
        let y: Vec<_> = x.iter().map(|p| 0.5 * (r * p) + t).collect();
        let a = align(&x, &y, AlignMode::Similarity).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-12);
        assert!((a.rotation - r).norm() < 1e-12);
        assert!((a.translation - t).norm() < 1e-12);
        assert!(ate_positions(&x, &y, AlignMode::Rigid).unwrap().rmse > 0.1);
        assert!(ate_positions(&x, &y, AlignMode::Similarity).unwrap().rmse < 1e-9);
    }

    #[test]
    fn reflection_is_corrected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(&mut rng, 20);
        let y: Vec<_> = x.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let a = align(&x, &y, AlignMode::Rigid).unwrap();
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_flagged() {
        let x: Vec<_> = (0..5).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        let a = align(&x, &x, AlignMode::Rigid).unwrap();
        assert!(a.degenerate);
        assert!(ate_positions(&x, &x, AlignMode::Rigid).unwrap().rmse < 1e-12);
        assert_eq!(align(&x[..2], &x[..2], AlignMode::Rigid), Err(EvalError::TooFewPoses(2)));
    }

    fn traj(ts: &[f64]) -> Trajectory {
        Trajectory::new(ts.to_vec(), ts.iter().map(|&t| Pose::from_translation(t, t * t, 1.0)).collect()).unwrap()
    }

    #[test]
    fn association_within_tolerance() {
        let gt = traj(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let est = traj(&[0.005, 1.019, 2.5, 3.0, 4.03]);
        let (e, g) = associate(&est, &gt, ASSOCIATION_TOLERANCE).unwrap();
        assert_eq!(g.timestamps(), &[0.0, 1.0, 3.0]);
        assert_eq!(e.timestamps(), &[0.005, 1.019, 3.0]);
        let far = traj(&[0.5, 1.5, 2.5]);
        assert_eq!(associate(&far, &gt, ASSOCIATION_TOLERANCE), Err(EvalError::AssociationTooSparse { matches: 0 }));
    }

    #[test]
    fn trajectory_validation() {
        assert_eq!(Trajectory::new(vec![0.0, 0.0], vec![Pose::identity(); 2]), Err(EvalError::NonIncreasingTimestamps(1)));
        assert!(matches!(Trajectory::new(vec![0.0], vec![]), Err(EvalError::MalformedTrajectory { .. })));
    }

    fn outcome(seed: u64, rmse: Option<f64>) -> RunOutcome {
        RunOutcome {
            seed,
            report: rmse.map(|r| AteReport { rmse: r, alignment: AlignMode::Rigid, scale: 1.0, degenerate: false, per_frame: vec![r] }),
            error: rmse.is_none().then(|| "failed".into()),
        }
    }

    #[test]
    fn median_rules() {
        let r = median_of_runs((0..5).map(|k| outcome(k, Some([3.0, 1.0, 5.0, 2.0, 4.0][k as usize]))).collect()).unwrap();
        assert_eq!((r.median.rmse, r.median_seed), (3.0, 0));
        let r = median_of_runs(vec![outcome(0, Some(1.0)), outcome(1, None), outcome(2, Some(100.0)), outcome(3, None), outcome(4, Some(2.0))]).unwrap();
        assert_eq!((r.median.rmse, r.completed), (2.0, 3));
        let r = median_of_runs((0..5).map(|k| outcome(k, Some(7.0))).collect()).unwrap();
        assert_eq!(r.median_seed, 0);
        let err = median_of_runs(vec![outcome(0, Some(1.0)), outcome(1, None), outcome(2, Some(1.0))]);
        assert_eq!(err, Err(EvalError::TooFewCompletedRuns { completed: 2, runs: 3 }));
    }

    #[test]
    fn cost_model() {
        assert_eq!(default_precompute_cost(2000), 9.4e9);
        assert_eq!(default_precompute_cost(0), 0.0);
        assert_eq!(default_precompute_cost(1), 4.7e6);
    }
}
