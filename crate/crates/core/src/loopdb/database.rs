use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codebook::build_codebook;
use super::verify::{geometric_verify, VerifyParams};
use super::vlad::{retrieve_candidates, vlad_descriptor, GlobalDescriptor, RetrievalParams};
use super::{mix_seed, stable_hash, Codebook, LocalFeature, LoopDbError};

pub const DATABASE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildParams {
    pub threshold: f64,
    pub window: usize,
    pub exclusion: usize,
    pub clusters: usize,
    pub min_inliers: usize,
    pub ratio: f64,
    pub ransac_iters: usize,
    pub sampson_px: f64,
    pub ransac_confidence: f64,
    /// Features drawn (seeded, without replacement) to train the codebook.
    pub codebook_sample: usize,
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        let r = RetrievalParams::default();
        let v = VerifyParams::default();
        BuildParams {
            threshold: r.threshold,
            window: r.window,
            exclusion: r.exclusion,
            clusters: 32,
            min_inliers: v.min_inliers,
            ratio: v.ratio,
            ransac_iters: v.max_iters,
            sampson_px: v.sampson_px,
            ransac_confidence: v.confidence,
            codebook_sample: 20_000,
            seed: 0,
        }
    }
}

impl BuildParams {
    pub fn retrieval(&self) -> RetrievalParams {
        RetrievalParams { threshold: self.threshold, window: self.window, exclusion: self.exclusion }
    }

    pub fn verify(&self) -> VerifyParams {
        VerifyParams {
            min_inliers: self.min_inliers,
            ratio: self.ratio,
            max_iters: self.ransac_iters,
            sampson_px: self.sampson_px,
            confidence: self.ransac_confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopPair {
    pub scene: String,
    pub frame_i: usize,
    pub frame_j: usize,
    pub similarity: f64,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub params: BuildParams,
    pub scenes: Vec<String>,
    pub codebook_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopDatabase {
    pub provenance: Provenance,
    /// Sorted by `(scene, frame_i, frame_j)`, no duplicates.
    pub pairs: Vec<LoopPair>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BuildSummary {
    /// Pair count for every input scene, in input order.
    pub per_scene: Vec<(String, usize)>,
    pub skipped_frames: usize,
    pub verified_candidates: usize,
    pub rejected_candidates: usize,
}

/// Features of one scene, frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub name: String,
    pub frames: Vec<Vec<LocalFeature>>,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceLine {
    provenance: Provenance,
}

impl LoopDatabase {
    pub fn pairs_for_scene<'a>(&'a self, scene: &'a str) -> impl Iterator<Item = &'a LoopPair> + 'a {
        self.pairs.iter().filter(move |p| p.scene == scene)
    }

    /// JSON lines: the provenance object first, then one object per pair.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&ProvenanceLine { provenance: self.provenance.clone() }).expect("serializable");
        s.push('\n');
        for p in &self.pairs {
            s.push_str(&serde_json::to_string(p).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LoopDbError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LoopDbError::Parse { line: 1, reason: "empty database file".into() })?;
        let head: ProvenanceLine = serde_json::from_str(first)
            .map_err(|e| LoopDbError::Parse { line: 1, reason: format!("provenance: {e}") })?;
        let mut pairs = Vec::new();
        for (i, line) in lines {
            let p: LoopPair =
                serde_json::from_str(line).map_err(|e| LoopDbError::Parse { line: i + 1, reason: e.to_string() })?;
            if p.frame_i >= p.frame_j {
                return Err(LoopDbError::Parse { line: i + 1, reason: "frame_i must be < frame_j".into() });
            }
            pairs.push(p);
        }
        pairs.sort_by(|a, b| (&a.scene, a.frame_i, a.frame_j).cmp(&(&b.scene, b.frame_i, b.frame_j)));
        pairs.dedup_by(|a, b| (&a.scene, a.frame_i, a.frame_j) == (&b.scene, b.frame_i, b.frame_j));
        Ok(LoopDatabase { provenance: head.provenance, pairs })
    }
}

fn train_codebook(scenes: &[SceneFeatures], params: &BuildParams) -> Result<Option<(Codebook, usize)>, LoopDbError> {
    let all: Vec<&[f64]> = scenes.iter().flat_map(|s| s.frames.iter().flatten()).map(|f| f.descriptor.as_slice()).collect();
    if all.is_empty() {
        return Ok(None);
    }
    let dim = all[0].len();
    let all: Vec<&[f64]> = all.into_iter().filter(|d| d.len() == dim).collect();
    let sample: Vec<&[f64]> = if all.len() > params.codebook_sample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed ^ 0xC0DE_B00C));
        let mut idx = rand::seq::index::sample(&mut rng, all.len(), params.codebook_sample).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };
    let n = sample.len();
    let cb = build_codebook(&sample, params.clusters, mix_seed(params.seed))?;
    Ok(Some((cb, n)))
}

struct SceneResult {
    pairs: Vec<LoopPair>,
    skipped: usize,
    verified: usize,
    rejected: usize,
}

fn process_scene(scene: &SceneFeatures, codebook: &Codebook, params: &BuildParams) -> SceneResult {
    let mut skipped = 0;
    let descriptors: Vec<GlobalDescriptor> = scene
        .frames
        .iter()
        .enumerate()
        .map(|(k, feats)| match vlad_descriptor(feats, codebook) {
            Ok(d) => {
                if !d.valid {
                    skipped += 1;
                }
                d
            }
            Err(e) => {
                debug!("{} frame {k}: {e}", scene.name);
                skipped += 1;
                GlobalDescriptor::invalid(codebook.k() * codebook.dim())
            }
        })
        .collect();
    let retrieval = params.retrieval();
    let verify = params.verify();
    let scene_seed = mix_seed(params.seed ^ stable_hash(&scene.name));
    let (mut verified, mut rejected) = (0, 0);
    let mut pairs = Vec::new();
    // Frames are handled in order; the index only ever holds earlier frames.
    for q in 0..descriptors.len() {
        for (f, sim) in retrieve_candidates(&descriptors[..q], q, &descriptors[q], &retrieval) {
            verified += 1;
            let seed = mix_seed(scene_seed ^ ((f as u64) << 32 | q as u64));
            let v = geometric_verify(&scene.frames[f], &scene.frames[q], &verify, seed);
            if v.accepted {
                pairs.push(LoopPair { scene: scene.name.clone(), frame_i: f, frame_j: q, similarity: sim, inliers: v.inliers });
            } else {
                rejected += 1;
                debug!("{} ({f}, {q}) sim {sim:.3} rejected: {}", scene.name, v.reason.unwrap_or_default());
            }
        }
    }
    SceneResult { pairs, skipped, verified, rejected }
}

/// Runs retrieval and verification on every scene (scenes in parallel,
/// frames within a scene sequentially) and merges the accepted pairs.
pub fn build_database(scenes: &[SceneFeatures], params: &BuildParams) -> Result<(LoopDatabase, BuildSummary), LoopDbError> {
    let names: Vec<String> = scenes.iter().map(|s| s.name.clone()).collect();
    let Some((codebook, codebook_features)) = train_codebook(scenes, params)? else {
        warn!("corpus has no features; database is empty");
        let summary = BuildSummary { per_scene: names.iter().map(|n| (n.clone(), 0)).collect(), ..Default::default() };
        let provenance = Provenance { format_version: DATABASE_FORMAT_VERSION, params: params.clone(), scenes: names, codebook_features: 0 };
        return Ok((LoopDatabase { provenance, pairs: Vec::new() }, summary));
    };
    info!("codebook: {} centers from {} features", codebook.k(), codebook_features);

    let results: Vec<SceneResult> = scenes.par_iter().map(|s| process_scene(s, &codebook, params)).collect();

    let mut summary = BuildSummary::default();
    let mut by_key: BTreeMap<(String, usize, usize), LoopPair> = BTreeMap::new();
    for (scene, r) in scenes.iter().zip(results) {
        summary.per_scene.push((scene.name.clone(), r.pairs.len()));
        summary.skipped_frames += r.skipped;
        summary.verified_candidates += r.verified;
        summary.rejected_candidates += r.rejected;
        for p in r.pairs {
            by_key.entry((p.scene.clone(), p.frame_i, p.frame_j)).or_insert(p);
        }
    }
    if summary.skipped_frames > 0 {
        warn!("{} frames skipped (empty or degenerate descriptors)", summary.skipped_frames);
    }
    let provenance = Provenance { format_version: DATABASE_FORMAT_VERSION, params: params.clone(), scenes: names, codebook_features };
    Ok((LoopDatabase { provenance, pairs: by_key.into_values().collect() }, summary))
}
