use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use autoloop_core::eval::{
    associate, ate, default_precompute_cost, median_of_runs, AlignMode, EvalError, RunOutcome, Trajectory,
    ASSOCIATION_TOLERANCE, DESCRIPTOR_FLOPS, FEATURE_FLOPS,
};
use autoloop_core::liegroup::{parse_tum, write_tum};
use autoloop_core::loopdb::{
    benchmark_corpus, build_database, drift_scene, generate_scene, parse_features, write_features, BuildParams,
    LoopDatabase, SceneFeatures, SceneSpec,
};
use autoloop_core::trainer::{finetune, initial_model, scene_pairs, TrainError, TrainerConfig};
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;

use crate::manifest::{list_with_suffix, read_file, write_file, RunManifest};
use crate::{BuildDbArgs, CliError, CostArgs, EvalArgs, GenScenesArgs, Preset, Switch, TrainArgs, TrainPreset};

pub const SCENE_SUFFIX: &str = ".scene.json";
pub const FEATURES_SUFFIX: &str = ".features";
pub const GT_SUFFIX: &str = ".gt.tum";
pub const DATABASE_FILE: &str = "loops.jsonl";
pub const HISTOGRAM_FILE: &str = "pairs_per_scene.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.tum";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    scenes: Vec<SceneSpec>,
}

fn json_error(path: &Path, e: serde_json::Error) -> CliError {
    CliError::User(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Internal(e.to_string()))
}

fn to_pretty<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::Internal(e.to_string()))
}

pub fn gen_scenes(args: &GenScenesArgs) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let mut specs = match (&args.spec, args.preset) {
        (Some(path), _) => {
            let text = read_file(path)?;
            let file: SceneFile = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
            inputs.push((path.clone(), text));
            file.scenes
        }
        (None, Some(Preset::Corpus)) => benchmark_corpus(args.scenes, 0),
        (None, Some(Preset::Drift)) => vec![drift_scene(0)],
        (None, None) => return Err(CliError::User("give --spec or --preset".into())),
    };
    if let Some(seed) = args.seed {
        for (k, s) in specs.iter_mut().enumerate() {
            s.seed = seed.wrapping_add(k as u64);
        }
    }
    let mut names = BTreeSet::new();
    for (k, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| CliError::User(format!("scenes[{k}] ({}): {e}", s.name)))?;
        if !names.insert(s.name.clone()) {
            return Err(CliError::User(format!("scenes[{k}]: duplicate scene name '{}'", s.name)));
        }
    }

    let mut manifest = RunManifest::new("gen-scenes", args.seed, json!({ "scenes": specs }));
    for (p, text) in &inputs {
        manifest.input(p, text.as_bytes());
    }
    for s in &specs {
        for suffix in [SCENE_SUFFIX, FEATURES_SUFFIX, GT_SUFFIX] {
            manifest.output(format!("{}{suffix}", s.name));
        }
    }
    manifest.output("revisits.csv");
    manifest.write(&args.out)?;

    let mut revisits = String::from("scene,frame_i,frame_j\n");
    for spec in &specs {
        let scene = generate_scene(spec).map_err(|e| CliError::User(format!("{}: {e}", spec.name)))?;
        let base = args.out.join(&spec.name);
        write_file(&with_suffix(&base, SCENE_SUFFIX), &to_pretty(spec)?)?;
        write_file(&with_suffix(&base, FEATURES_SUFFIX), &write_features(spec.descriptor_dim, &scene.features))?;
        write_file(&with_suffix(&base, GT_SUFFIX), &write_tum(&scene.trajectory()))?;
        for (i, j) in &scene.revisits {
            writeln!(revisits, "{},{i},{j}", spec.name).unwrap();
        }
        println!("{}: {} frames, {} revisits", spec.name, scene.len(), scene.revisits.len());
    }
    write_file(&args.out.join("revisits.csv"), &revisits)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_stem_before(path: &Path, suffix: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(name).to_string()
}

pub fn build_db(args: &BuildDbArgs) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let mut params = match &args.config {
        Some(path) => {
            let text = read_file(path)?;
            let p: BuildParams = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
            inputs.push((path.clone(), text));
            p
        }
        None => BuildParams::default(),
    };
    if let Some(v) = args.threshold {
        params.threshold = v;
    }
    if let Some(v) = args.min_inliers {
        params.min_inliers = v;
    }
    if let Some(v) = args.window {
        params.window = v;
    }
    if let Some(v) = args.exclusion {
        params.exclusion = v;
    }
    if let Some(v) = args.clusters {
        params.clusters = v;
    }
    if let Some(v) = args.seed {
        params.seed = v;
    }
    if !(-1.0..=1.0).contains(&params.threshold) {
        return Err(CliError::User(format!("--threshold must lie in [-1, 1], got {}", params.threshold)));
    }
    if params.clusters == 0 {
        return Err(CliError::User("--clusters must be positive".into()));
    }

    let files = list_with_suffix(&args.scenes, FEATURES_SUFFIX)?;
    let mut scenes = Vec::with_capacity(files.len());
    for path in &files {
        let text = read_file(path)?;
        let (_, frames) = parse_features(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        scenes.push(SceneFeatures { name: file_stem_before(path, FEATURES_SUFFIX), frames });
        inputs.push((path.clone(), text));
    }

    let mut manifest = RunManifest::new("build-db", Some(params.seed), to_value(&params)?);
    for (p, text) in &inputs {
        manifest.input(p, text.as_bytes());
    }
    for o in [DATABASE_FILE, HISTOGRAM_FILE, "build_summary.json"] {
        manifest.output(o);
    }
    manifest.write(&args.out)?;

    if scenes.is_empty() {
        warn!("no {FEATURES_SUFFIX} files in {}; writing an empty database", args.scenes.display());
    }
    let (db, summary) = build_database(&scenes, &params).map_err(|e| CliError::User(e.to_string()))?;
    write_file(&args.out.join(DATABASE_FILE), &db.to_jsonl())?;
    let mut hist = String::from("scene,pairs\n");
    for (name, n) in &summary.per_scene {
        writeln!(hist, "{name},{n}").unwrap();
        println!("{name}: {n} pairs");
    }
    write_file(&args.out.join(HISTOGRAM_FILE), &hist)?;
    let summary_json = json!({
        "scenes": summary.per_scene.len(),
        "pairs": db.pairs.len(),
        "skipped_frames": summary.skipped_frames,
        "verified_candidates": summary.verified_candidates,
        "rejected_candidates": summary.rejected_candidates,
        "codebook_features": db.provenance.codebook_features,
    });
    write_file(&args.out.join("build_summary.json"), &to_pretty(&summary_json)?)?;
    println!("{} pairs over {} scenes", db.pairs.len(), summary.per_scene.len());
    Ok(())
}

fn resolve_train_config(args: &TrainArgs, inputs: &mut Vec<(PathBuf, String)>) -> Result<TrainerConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = read_file(path)?;
            let c: TrainerConfig = serde_json::from_str(&text).map_err(|e| json_error(path, e))?;
            inputs.push((path.clone(), text));
            c
        }
        None => match args.preset {
            TrainPreset::Default => TrainerConfig::default(),
            TrainPreset::Benchmark => TrainerConfig::benchmark(),
        },
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
        config.agent.noise_decay_steps = steps;
    }
    if let Some(c) = args.cadence {
        config.cadence = c;
    }
    if let Some(a) = args.agent {
        config.agent_enabled = a == Switch::On;
    }
    if let Some(w) = args.w_loop {
        if config.agent_enabled {
            return Err(CliError::User("--w-loop fixes the loop weight and needs --agent off".into()));
        }
        config.fixed_w_loop = w;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate().map_err(|e| CliError::User(e.to_string()))?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let spec_text = read_file(&args.scene)?;
    let spec: SceneSpec = serde_json::from_str(&spec_text).map_err(|e| json_error(&args.scene, e))?;
    inputs.push((args.scene.clone(), spec_text));
    let db_text = read_file(&args.db)?;
    let db = LoopDatabase::from_jsonl(&db_text).map_err(|e| CliError::User(format!("{}: {e}", args.db.display())))?;
    inputs.push((args.db.clone(), db_text));
    let config = resolve_train_config(args, &mut inputs)?;

    let mut manifest = RunManifest::new("train", Some(config.seed), to_value(&config)?);
    for (p, text) in &inputs {
        manifest.input(p, text.as_bytes());
    }
    let mut outputs = vec!["config.json", "train_log.csv", "agent_updates.csv", "monitor.csv", "odometry.tum", TRAJECTORY_FILE, "ate.json"];
    if config.agent_enabled {
        outputs.push("agent_checkpoint.json");
    }
    for o in &outputs {
        manifest.output(*o);
    }
    manifest.write(&args.out)?;
    write_file(&args.out.join("config.json"), &to_pretty(&config)?)?;

    let scene = generate_scene(&spec).map_err(|e| CliError::User(format!("{}: {e}", args.scene.display())))?;
    if scene_pairs(&db, scene.name()).is_empty() {
        return Err(CliError::User(format!(
            "database {} has no loop pairs for scene '{}'; rebuild it from this scene's features or lower --threshold / --min-inliers",
            args.db.display(),
            scene.name()
        )));
    }
    let out = finetune(&scene, &db, &config).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
        TrainError::InvalidConfig(_) | TrainError::NoPairsInScene(_) => CliError::User(e.to_string()),
        other => CliError::Internal(other.to_string()),
    })?;

    let stamped = |poses: Vec<autoloop_core::Pose>| scene.timestamps.iter().copied().zip(poses).collect::<Vec<_>>();
    write_file(&args.out.join("train_log.csv"), &out.log.to_csv())?;
    write_file(&args.out.join("agent_updates.csv"), &out.log.updates_csv())?;
    write_file(&args.out.join("monitor.csv"), &out.log.monitor_csv())?;
    write_file(&args.out.join("odometry.tum"), &write_tum(&stamped(initial_model(&scene, &config).trajectory())))?;
    write_file(&args.out.join(TRAJECTORY_FILE), &write_tum(&stamped(out.model.trajectory())))?;
    if let Some(agent) = &out.agent {
        write_file(&args.out.join("agent_checkpoint.json"), &agent.checkpoint_json())?;
    }

    let mode: AlignMode = args.align.into();
    let gt = Trajectory::new(scene.timestamps.clone(), scene.poses.clone()).map_err(|e| CliError::Internal(e.to_string()))?;
    let traj = |poses| Trajectory::new(scene.timestamps.clone(), poses).map_err(|e: EvalError| CliError::Internal(e.to_string()));
    let before = ate(&traj(initial_model(&scene, &config).trajectory())?, &gt, mode).map_err(|e| CliError::Internal(e.to_string()))?;
    let after = ate(&traj(out.model.trajectory())?, &gt, mode).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&args.out.join("ate.json"), &to_pretty(&json!({ "initial": before, "final": after }))?)?;
    println!("{}: {} steps, ATE {:.6} -> {:.6}", scene.name(), config.steps, before.rmse, after.rmse);
    Ok(())
}

fn load_trajectory(path: &Path) -> Result<(Trajectory, String), CliError> {
    let text = read_file(path)?;
    let entries = parse_tum(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let t = Trajectory::from_stamped(entries).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    Ok((t, text))
}

fn eval_pair(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<(autoloop_core::eval::AteReport, Trajectory), EvalError> {
    let (e, g) = associate(est, gt, ASSOCIATION_TOLERANCE)?;
    Ok((ate(&e, &g, mode)?, g))
}

/// Seed recorded in a run directory's manifest.
fn run_seed(dir: &Path) -> Option<u64> {
    let text = fs::read_to_string(dir.join(crate::manifest::MANIFEST_FILE)).ok()?;
    serde_json::from_str::<serde_json::Value>(&text).ok()?.get("seed")?.as_u64()
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mode: AlignMode = args.align.into();
    let (gt, gt_text) = load_trajectory(&args.gt)?;
    let mut manifest = RunManifest::new("eval", None, json!({ "align": mode, "association_tolerance": ASSOCIATION_TOLERANCE }));
    manifest.input(&args.gt, gt_text.as_bytes());

    if let Some(est_path) = &args.est {
        let (est, est_text) = load_trajectory(est_path)?;
        manifest.input(est_path, est_text.as_bytes());
        manifest.output("ate.json");
        manifest.output("per_frame.csv");
        manifest.write(&args.out)?;
        let (report, g) = eval_pair(&est, &gt, mode).map_err(|e| CliError::User(e.to_string()))?;
        write_file(&args.out.join("ate.json"), &(report.to_json() + "\n"))?;
        write_file(&args.out.join("per_frame.csv"), &report.per_frame_csv(g.timestamps()))?;
        println!("ATE ({mode:?}) rmse {:.9} over {} frames", report.rmse, report.per_frame.len());
        return Ok(());
    }

    let runs_dir = args.runs.as_ref().expect("clap requires --est or --runs");
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs_dir)
        .map_err(|e| CliError::io(runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(TRAJECTORY_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::User(format!("{}: no run directories containing {TRAJECTORY_FILE}", runs_dir.display())));
    }
    let mut outcomes = Vec::new();
    for (k, dir) in dirs.iter().enumerate() {
        let seed = run_seed(dir).unwrap_or(k as u64);
        let path = dir.join(TRAJECTORY_FILE);
        let result = load_trajectory(&path).and_then(|(est, text)| {
            manifest.input(&path, text.as_bytes());
            eval_pair(&est, &gt, mode).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
        });
        outcomes.push(match result {
            Ok((r, _)) => RunOutcome { seed, report: Some(r), error: None },
            Err(e) => {
                warn!("{e}");
                RunOutcome { seed, report: None, error: Some(e.to_string()) }
            }
        });
    }
    manifest.output("experiment.json");
    manifest.write(&args.out)?;
    let report = median_of_runs(outcomes).map_err(|e| CliError::User(e.to_string()))?;
    write_file(&args.out.join("experiment.json"), &to_pretty(&report)?)?;
    println!("median ATE ({mode:?}) {:.9} (seed {}, {} of {} runs)", report.median.rmse, report.median_seed, report.completed, report.runs.len());
    Ok(())
}

pub fn cost(args: &CostArgs) -> Result<(), CliError> {
    let per_sequence = default_precompute_cost(args.frames);
    let total = per_sequence * args.scenes as f64;
    let summary = json!({
        "frames": args.frames,
        "scenes": args.scenes,
        "descriptor_flops_per_frame": DESCRIPTOR_FLOPS,
        "feature_flops_per_frame": FEATURE_FLOPS,
        "flops_per_scene": per_sequence,
        "total_flops": total,
    });
    if let Some(out) = &args.out {
        let mut manifest = RunManifest::new("cost", None, summary.clone());
        manifest.output("cost.json");
        manifest.write(out)?;
        write_file(&out.join("cost.json"), &to_pretty(&summary)?)?;
    }
    info!("{} frames x {} scenes", args.frames, args.scenes);
    println!("{total:e} FLOPs ({} frames x {} scenes)", args.frames, args.scenes);
    Ok(())
}
