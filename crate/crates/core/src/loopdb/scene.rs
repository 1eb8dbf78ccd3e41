//! Synthetic scenes: a down-looking pinhole camera flying over textured
//! landmarks, with revisits planted at exactly repeated poses.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize, LocalFeature, LoopDbError};
use crate::liegroup::{Pose, Rotation};
use crate::losses::FlowView;

/// Pinhole intrinsics, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { focal: 500.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 }
    }
}

impl Camera {
    /// Pixel of world point `x` seen from camera-to-world pose `pose`, if it
    /// lies in front of the camera and inside the image.
    pub fn project(&self, pose: &Pose, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = pose.inverse().transform_point(x);
        if c.z <= 0.1 {
            return None;
        }
        let u = self.focal * c.x / c.z + self.cx;
        let v = self.focal * c.y / c.z + self.cy;
        (u >= 0.0 && u < self.width && v >= 0.0 && v < self.height).then(|| Vector2::new(u, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Straight flight along +x, `step` meters per frame.
    Line { step: f64 },
    /// Closed circle; frame `k` and `k + frames_per_lap` share a pose.
    Circle { radius: f64, frames_per_lap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub name: String,
    pub shape: Shape,
    pub frames: usize,
    /// Flight height above the landmark mid-plane, meters.
    pub altitude: f64,
    pub landmarks: usize,
    /// Landmark heights are uniform in `[-relief, relief]` meters.
    pub relief: f64,
    /// `(i, j)`: frame `j` is placed at exactly the pose of frame `i`.
    pub revisits: Vec<[usize; 2]>,
    /// Per-component Gaussian noise added to descriptors before renormalizing.
    pub descriptor_noise: f64,
    pub pixel_noise: f64,
    pub descriptor_dim: usize,
    /// Landmark descriptors scatter around this many shared visual-word
    /// prototypes (0 draws them uniformly on the sphere).
    pub vocabulary_words: usize,
    /// Per-component spread of a descriptor around its word prototype.
    pub word_spread: f64,
    /// Seeds the prototypes; scenes sharing it share a vocabulary.
    pub vocabulary_seed: u64,
    pub frame_interval: f64,
    pub camera: Camera,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            name: "scene".into(),
            shape: Shape::Line { step: 3.9 },
            frames: 240,
            altitude: 6.0,
            landmarks: 12000,
            relief: 1.5,
            revisits: Vec::new(),
            descriptor_noise: 0.05,
            pixel_noise: 0.5,
            descriptor_dim: 32,
            vocabulary_words: 32,
            word_spread: 0.17,
            vocabulary_seed: 7,
            frame_interval: 0.1,
            camera: Camera::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), LoopDbError> {
        let bad = |m: String| Err(LoopDbError::InvalidSpec(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.chars().any(char::is_whitespace) {
            return bad(format!("name '{}' must be non-empty without slashes or spaces", self.name));
        }
        if self.frames < 2 {
            return bad(format!("frames: need at least 2, got {}", self.frames));
        }
        if self.landmarks == 0 {
            return bad("landmarks: must be positive".into());
        }
        if self.descriptor_dim == 0 {
            return bad("descriptor_dim: must be positive".into());
        }
        let nonneg = [
            ("descriptor_noise", self.descriptor_noise),
            ("pixel_noise", self.pixel_noise),
            ("relief", self.relief),
            ("word_spread", self.word_spread),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{field}: must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.altitude > 1.25 * self.relief && self.altitude > 0.2) {
            return bad(format!("altitude: must exceed 1.25 * relief and 0.2, got {}", self.altitude));
        }
        if !(self.frame_interval > 0.0) {
            return bad("frame_interval: must be positive".into());
        }
        match self.shape {
            Shape::Line { step } if !(step.is_finite() && step != 0.0) => return bad("shape.step: must be nonzero".into()),
            Shape::Circle { radius, frames_per_lap } if !(radius > 0.0) || frames_per_lap < 3 => {
                return bad("shape: circle needs radius > 0 and frames_per_lap >= 3".into())
            }
            _ => {}
        }
        for (n, &[i, j]) in self.revisits.iter().enumerate() {
            if !(i < j && j < self.frames) {
                return bad(format!("revisits[{n}]: need i < j < frames, got ({i}, {j})"));
            }
        }
        Ok(())
    }

    fn base_pose(&self, k: usize) -> Pose {
        // Camera axes: x along travel, z pointing down at the ground.
        let down = Rotation::from_wxyz(0.0, 1.0, 0.0, 0.0);
        let (pos, yaw) = match self.shape {
            Shape::Line { step } => (Vector3::new(step * k as f64, 0.0, self.altitude), 0.0),
            Shape::Circle { radius, frames_per_lap } => {
                let phi = 2.0 * PI * (k % frames_per_lap) as f64 / frames_per_lap as f64;
                (Vector3::new(radius * phi.cos(), radius * phi.sin(), self.altitude), phi + PI / 2.0)
            }
        };
        let heading = Rotation::from_axis_angle(&Vector3::z(), yaw);
        Pose::new(heading.compose(&down), pos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub timestamps: Vec<f64>,
    /// Ground-truth camera-to-world poses.
    pub poses: Vec<Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub landmark_descriptors: Vec<Vec<f64>>,
    /// Sorted landmark indices visible in each frame.
    pub visible: Vec<Vec<usize>>,
    pub features: Vec<Vec<LocalFeature>>,
    /// Every frame pair `(i, j)`, `i < j`, whose ground-truth poses coincide.
    pub revisits: Vec<(usize, usize)>,
}

impl SyntheticScene {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Flow-loss view of frames `range`.
    pub fn flow_view(&self, range: std::ops::Range<usize>) -> FlowView<'_> {
        FlowView {
            ground_truth: &self.poses[range.clone()],
            landmarks: &self.landmarks,
            visible: &self.visible[range],
        }
    }

    pub fn trajectory(&self) -> Vec<(f64, Pose)> {
        self.timestamps.iter().copied().zip(self.poses.iter().copied()).collect()
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

/// Coincident-pose pairs, by exact position match then relative-pose norm.
fn coincident_pairs(poses: &[Pose]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..poses.len() {
        for i in 0..j {
            if (poses[i].translation - poses[j].translation).norm() < 1e-9 {
                let d = poses[i].between(&poses[j]);
                if d.log().map(|xi| xi.norm() < 1e-6).unwrap_or(false) {
                    out.push((i, j));
                }
            }
        }
    }
    out.sort();
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, LoopDbError> {
    spec.validate()?;
    let mut poses: Vec<Pose> = (0..spec.frames).map(|k| spec.base_pose(k)).collect();
    let mut plan = spec.revisits.clone();
    plan.sort_by_key(|r| r[1]);
    for [i, j] in plan {
        poses[j] = poses[i];
    }
    let timestamps = (0..spec.frames).map(|k| k as f64 * spec.frame_interval).collect();

    let mut vocab_rng = ChaCha8Rng::seed_from_u64(spec.vocabulary_seed);
    let words: Vec<Vec<f64>> = (0..spec.vocabulary_words).map(|_| random_unit(&mut vocab_rng, spec.descriptor_dim)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cam = spec.camera;
    let mut landmarks = Vec::with_capacity(spec.landmarks);
    let mut descriptors = Vec::with_capacity(spec.landmarks);
    for _ in 0..spec.landmarks {
        // Drop each landmark through a random pixel of a random frame, with a
        // margin so footprints extend past the image border.
        let pose = poses[rng.random_range(0..poses.len())];
        let u = rng.random_range(-0.1 * cam.width..1.1 * cam.width);
        let v = rng.random_range(-0.1 * cam.height..1.1 * cam.height);
        let z0 = if spec.relief > 0.0 { rng.random_range(-spec.relief..spec.relief) } else { 0.0 };
        let ray = pose.rotation.rotate(&Vector3::new((u - cam.cx) / cam.focal, (v - cam.cy) / cam.focal, 1.0));
        let t = (z0 - pose.translation.z) / ray.z;
        landmarks.push(pose.translation + ray * t);
        let desc = if words.is_empty() {
            random_unit(&mut rng, spec.descriptor_dim)
        } else {
            let w = &words[rng.random_range(0..words.len())];
            let mut d: Vec<f64> = w
                .iter()
                .map(|x| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    x + spec.word_spread * n
                })
                .collect();
            normalize(&mut d);
            d
        };
        descriptors.push(desc);
    }

    let pix = Normal::new(0.0, spec.pixel_noise.max(0.0)).expect("finite sigma");
    let mut visible = Vec::with_capacity(spec.frames);
    let mut features = Vec::with_capacity(spec.frames);
    for pose in &poses {
        let mut vis = Vec::new();
        let mut feats = Vec::new();
        for (l, x) in landmarks.iter().enumerate() {
            if let Some(p) = cam.project(pose, x) {
                vis.push(l);
                let noisy = if spec.pixel_noise > 0.0 {
                    p + Vector2::new(pix.sample(&mut rng), pix.sample(&mut rng))
                } else {
                    p
                };
                let desc: Vec<f64> = descriptors[l]
                    .iter()
                    .map(|d| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        d + spec.descriptor_noise * n
                    })
                    .collect();
                feats.push(LocalFeature::new(noisy, desc));
            }
        }
        feats.shuffle(&mut rng);
        visible.push(vis);
        features.push(feats);
    }

    let revisits = coincident_pairs(&poses);
    Ok(SyntheticScene {
        spec: spec.clone(),
        timestamps,
        poses,
        landmarks,
        landmark_descriptors: descriptors,
        visible,
        features,
        revisits,
    })
}

/// Per-frame travel of the benchmark scenes, meters. Large enough that
/// frames 100 apart share no landmarks.
pub const BENCHMARK_STEP: f64 = 3.9;

/// Planted-revisit corpus alternating two scene families: straight lines with
/// three teleport revisits, and two-lap circles where every frame of the
/// second lap revisits the first.
pub fn benchmark_corpus(scenes: usize, seed: u64) -> Vec<SceneSpec> {
    (0..scenes)
        .map(|s| {
            let seed = seed.wrapping_add(s as u64);
            if s % 2 == 0 {
                let o = s % 20;
                SceneSpec {
                    name: format!("line{s:03}"),
                    shape: Shape::Line { step: BENCHMARK_STEP },
                    landmarks: 26_000,
                    revisits: vec![[10 + o, 150 + o], [40, 190], [70 + o, 230]],
                    seed,
                    ..Default::default()
                }
            } else {
                let mut spec = circle_scene(1.0, seed);
                spec.name = format!("circle{s:03}");
                spec
            }
        })
        .collect()
}

/// Two laps of a 120-frame circle at `scale` times the benchmark geometry.
/// Images do not depend on the scale, so neither do the detected loop pairs.
pub fn circle_scene(scale: f64, seed: u64) -> SceneSpec {
    let d = SceneSpec::default();
    SceneSpec {
        name: "drift".into(),
        shape: Shape::Circle { radius: scale * 120.0 * BENCHMARK_STEP / (2.0 * PI), frames_per_lap: 120 },
        frames: 240,
        landmarks: 13_000,
        altitude: scale * d.altitude,
        relief: scale * d.relief,
        seed,
        ..d
    }
}

/// Scale of the fine-tuning benchmark scene: frames ~1 m apart, 1.5 m up.
pub const DRIFT_SCENE_SCALE: f64 = 0.25;

/// The scene the fine-tuning benchmark runs on.
pub fn drift_scene(seed: u64) -> SceneSpec {
    circle_scene(DRIFT_SCENE_SCALE, seed)
}
