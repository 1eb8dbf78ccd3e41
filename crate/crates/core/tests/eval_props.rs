use autoloop_core::eval::{align, associate, ate, ate_positions, precompute_cost, AlignMode, Trajectory};
use autoloop_core::liegroup::{exp_se3, Pose, Rotation, Twist};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(prop::array::uniform3(-10.0..10.0f64).prop_map(Vector3::from), n)
}

fn motion() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-5.0..5.0f64), prop::array::uniform3(-2.0..2.0f64))
        .prop_map(|(t, w)| exp_se3(&Twist::new(Vector3::from(t), Vector3::from(w))))
}

fn sse(est: &[Vector3<f64>], gt: &[Vector3<f64>], s: f64, r: &Matrix3<f64>, t: &Vector3<f64>) -> f64 {
    est.iter().zip(gt).map(|(x, y)| (y - (s * (r * x) + t)).norm_squared()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rigid_motion_of_estimate_leaves_ate_unchanged(gt in points(5..40), noise in points(40..41), g in motion()) {
        let est: Vec<_> = gt.iter().zip(&noise).map(|(y, n)| y + 0.05 * n).collect();
        let moved: Vec<_> = est.iter().map(|x| g.transform_point(x)).collect();
        for mode in [AlignMode::Rigid, AlignMode::Similarity] {
            let a = ate_positions(&est, &gt, mode).unwrap().rmse;
            let b = ate_positions(&moved, &gt, mode).unwrap().rmse;
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_never_worse_than_rigid(gt in points(5..40), est in points(40..41)) {
        let est = &est[..gt.len()];
        let rigid = ate_positions(est, &gt, AlignMode::Rigid).unwrap().rmse;
        let sim = ate_positions(est, &gt, AlignMode::Similarity).unwrap().rmse;
        prop_assert!(sim <= rigid + 1e-9);
    }

    #[test]
    fn alignment_is_a_local_minimum(gt in points(6..30), noise in points(30..31), g in motion(), axis in prop::array::uniform3(-1.0..1.0f64)) {
        let est: Vec<_> = gt.iter().zip(&noise).map(|(y, n)| g.transform_point(y) + 0.1 * n).collect();
        let a = align(&est, &gt, AlignMode::Similarity).unwrap();
        prop_assume!(!a.degenerate);
        let best = sse(&est, &gt, a.scale, &a.rotation, &a.translation);
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let dr = Rotation::from_axis_angle(&axis.normalize(), 1e-3).matrix();
        prop_assert!(sse(&est, &gt, a.scale, &(dr * a.rotation), &a.translation) >= best - 1e-9);
        prop_assert!(sse(&est, &gt, a.scale * 1.001, &a.rotation, &a.translation) >= best - 1e-9);
        prop_assert!(sse(&est, &gt, a.scale, &a.rotation, &(a.translation + Vector3::new(1e-3, 0.0, 0.0))) >= best - 1e-9);
        prop_assert!((a.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cost_is_linear_in_frames(a in 0u64..100_000, b in 0u64..100_000) {
        let c = |n| precompute_cost(n, 1.2e6, 3.5e6);
        prop_assert!((c(a + b) - c(a) - c(b)).abs() <= 1e-9 * c(a + b).max(1.0));
        prop_assert_eq!(c(0), 0.0);
    }

    #[test]
    fn association_tolerates_small_jitter(n in 5usize..50, jitter in prop::collection::vec(-0.009..0.009f64, 50)) {
        let poses: Vec<Pose> = (0..n).map(|k| Pose::from_translation(k as f64, (k * k) as f64 * 0.1, 0.0)).collect();
        let gt = Trajectory::new((0..n).map(|k| k as f64 * 0.1).collect(), poses.clone()).unwrap();
        let est = Trajectory::new((0..n).map(|k| k as f64 * 0.1 + jitter[k]).collect(), poses).unwrap();
        let (e, g) = associate(&est, &gt, 0.02).unwrap();
        prop_assert_eq!(e.len(), n);
        prop_assert!(ate(&e, &g, AlignMode::Rigid).unwrap().rmse < 1e-9);
    }
}
