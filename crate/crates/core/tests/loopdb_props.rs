use autoloop_core::loopdb::{
    build_codebook, build_database, generate_scene, geometric_verify, parse_features, vlad_descriptor, write_features, BuildParams,
    LocalFeature, LoopDatabase, SceneFeatures, SceneSpec, VerifyParams,
};
use nalgebra::Vector2;
use proptest::prelude::*;
use std::sync::OnceLock;

fn small_scene() -> &'static autoloop_core::loopdb::SyntheticScene {
    static SCENE: OnceLock<autoloop_core::loopdb::SyntheticScene> = OnceLock::new();
    SCENE.get_or_init(|| {
        let spec = autoloop_core::loopdb::circle_scene(1.0, 3);
        generate_scene(&SceneSpec { landmarks: 4000, ..spec }).unwrap()
    })
}

fn feature(dim: usize) -> impl Strategy<Value = LocalFeature> {
    (prop::array::uniform2(-1.0..1.0f64), prop::collection::vec(-1.0..1.0f64, dim))
        .prop_map(|(p, d)| LocalFeature::new(Vector2::from(p), d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn vlad_ignores_feature_order(feats in prop::collection::vec(feature(8), 20..60), seed in 0u64..1000, rot in 0usize..60) {
        let descs: Vec<&[f64]> = feats.iter().map(|f| f.descriptor.as_slice()).collect();
        let codebook = build_codebook(&descs, 4, seed).unwrap();
        let a = vlad_descriptor(&feats, &codebook).unwrap();
        let mut shuffled = feats.clone();
        shuffled.rotate_left(rot % feats.len());
        shuffled.reverse();
        let b = vlad_descriptor(&shuffled, &codebook).unwrap();
        prop_assert_eq!(a.valid, b.valid);
        let worst = a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-12, "max difference {worst:e}");
    }

    #[test]
    fn raising_min_inliers_only_rejects(i in 0usize..240, offset in 0usize..240, seed in 0u64..100) {
        let scene = small_scene();
        let j = (i + offset) % scene.len();
        let (fi, fj) = (&scene.features[i], &scene.features[j]);
        let mut accepted_before = true;
        for min_inliers in [0, 10, 30, 60, 120] {
            let v = geometric_verify(fi, fj, &VerifyParams { min_inliers, ..Default::default() }, seed);
            prop_assert!(accepted_before || !v.accepted, "accepted at {} after a rejection", min_inliers);
            accepted_before = v.accepted;
        }
    }

    #[test]
    fn feature_files_round_trip(frames in prop::collection::vec(prop::collection::vec(feature(4), 0..5), 1..6)) {
        let text = write_features(4, &frames);
        let (dim, back) = parse_features(&text).unwrap();
        prop_assert_eq!(dim, 4);
        prop_assert_eq!(back.len(), frames.len());
        prop_assert_eq!(write_features(4, &back), text);
    }
}

#[test]
fn database_round_trips_and_finds_lap_revisits() {
    let scene = small_scene();
    let feats = SceneFeatures { name: scene.name().to_string(), frames: scene.features.clone() };
    let (db, summary) = build_database(&[feats], &BuildParams::default()).unwrap();
    assert_eq!(LoopDatabase::from_jsonl(&db.to_jsonl()).unwrap(), db);
    assert_eq!(summary.per_scene.len(), 1);
    let truth: std::collections::BTreeSet<_> = scene.revisits.iter().copied().collect();
    let hits = db.pairs.iter().filter(|p| truth.contains(&(p.frame_i, p.frame_j))).count();
    assert!(hits as f64 >= 0.9 * truth.len() as f64, "{hits} of {}", truth.len());
    assert!(hits as f64 >= 0.9 * db.pairs.len() as f64);
}
