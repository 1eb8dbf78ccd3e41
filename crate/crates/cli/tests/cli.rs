use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autoloop_core::trainer::{TrainLog, TRAIN_LOG_HEADER};

fn autoloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoloop")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Drift scene plus its loop database under `root`.
fn drift_inputs(root: &Path) -> (PathBuf, PathBuf) {
    let scenes = root.join("scenes");
    let db = root.join("db");
    assert!(autoloop(&["gen-scenes", "--preset", "drift", "--out", &s(&scenes)]).status.success());
    assert!(autoloop(&["build-db", "--scenes", &s(&scenes), "--out", &s(&db)]).status.success());
    (scenes, db)
}

#[test]
fn default_training_logs_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, db) = drift_inputs(tmp.path());
    let run = tmp.path().join("run");
    let o = autoloop(&[
        "train",
        "--scene",
        &s(&scenes.join("drift.scene.json")),
        "--db",
        &s(&db.join("loops.jsonl")),
        "--out",
        &s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(text.starts_with(TRAIN_LOG_HEADER));
    let rows = TrainLog::parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 3360);
    assert!(rows.iter().enumerate().all(|(t, r)| r.step == t && r.action.is_some()));
    assert!(run.join("agent_checkpoint.json").is_file());
    assert_eq!(fs::read_to_string(run.join("monitor.csv")).unwrap().lines().count(), 1 + 3360 / 30);
    let ate: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("ate.json")).unwrap()).unwrap();
    assert!(ate["final"]["rmse"].as_f64().unwrap() < ate["initial"]["rmse"].as_f64().unwrap());
}

#[test]
fn control_run_has_fixed_weight_and_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, db) = drift_inputs(tmp.path());
    let run = tmp.path().join("run");
    let o = autoloop(&[
        "train",
        "--scene",
        &s(&scenes.join("drift.scene.json")),
        "--db",
        &s(&db.join("loops.jsonl")),
        "--agent",
        "off",
        "--w-loop",
        "0.25",
        "--steps",
        "50",
        "--out",
        &s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = TrainLog::parse_csv(&fs::read_to_string(run.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.w_loop == 0.25 && r.action.is_none()));
    assert!(!run.join("agent_checkpoint.json").exists());
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["steps"], 50);
    assert_eq!(config["agent"]["noise_decay_steps"], 50);
}

#[test]
fn histogram_matches_database() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, db) = drift_inputs(tmp.path());
    let pairs = fs::read_to_string(db.join("loops.jsonl")).unwrap();
    let db_pairs = autoloop_core::loopdb::LoopDatabase::from_jsonl(&pairs).unwrap().pairs.len();
    let hist = fs::read_to_string(db.join("pairs_per_scene.csv")).unwrap();
    assert_eq!(hist, format!("scene,pairs\ndrift,{db_pairs}\n"));
    assert_eq!(db_pairs, 120);
}

#[test]
fn empty_corpus_gives_empty_database() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let db = tmp.path().join("db");
    let o = autoloop(&["build-db", "--scenes", &s(&empty), "--out", &s(&db)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty database"));
    let parsed = autoloop_core::loopdb::LoopDatabase::from_jsonl(&fs::read_to_string(db.join("loops.jsonl")).unwrap()).unwrap();
    assert!(parsed.pairs.is_empty());
    assert_eq!(fs::read_to_string(db.join("pairs_per_scene.csv")).unwrap(), "scene,pairs\n");
}

#[test]
fn malformed_spec_reports_position_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, "{\"scenes\": [\n  {\"name\": \"x\",\n  ]}").unwrap();
    let o = autoloop(&["gen-scenes", "--spec", &s(&spec), "--out", &s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn user_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, db) = drift_inputs(tmp.path());
    let scene = s(&scenes.join("drift.scene.json"));
    let loops = s(&db.join("loops.jsonl"));
    let out = s(&tmp.path().join("run"));

    let o = autoloop(&["train", "--scene", &scene, "--db", &loops, "--w-loop", "0.5", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--agent off"));

    let missing = s(&tmp.path().join("nope.jsonl"));
    let o = autoloop(&["train", "--scene", &scene, "--db", &missing, "--out", &out]);
    assert_eq!(o.status.code(), Some(1));

    let o = autoloop(&["build-db", "--scenes", &s(&scenes), "--threshold", "2", "--out", &s(&tmp.path().join("db2"))]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(autoloop(&["train"]).status.code(), Some(1));
    assert_eq!(autoloop(&["--help"]).status.code(), Some(0));
}

#[test]
fn database_without_scene_pairs_is_actionable() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, _) = drift_inputs(tmp.path());
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let db = tmp.path().join("emptydb");
    assert!(autoloop(&["build-db", "--scenes", &s(&empty), "--out", &s(&db)]).status.success());
    let o = autoloop(&[
        "train",
        "--scene",
        &s(&scenes.join("drift.scene.json")),
        "--db",
        &s(&db.join("loops.jsonl")),
        "--out",
        &s(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no loop pairs for scene 'drift'"), "{}", stderr(&o));
}

#[test]
fn eval_of_ground_truth_is_zero_and_shifted_stamps_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, _) = drift_inputs(tmp.path());
    let gt = scenes.join("drift.gt.tum");
    let out = tmp.path().join("eval");
    let o = autoloop(&["eval", "--est", &s(&gt), "--gt", &s(&gt), "--align", "rigid", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ate.json")).unwrap()).unwrap();
    assert!(report["rmse"].as_f64().unwrap() < 1e-9);
    assert_eq!(fs::read_to_string(out.join("per_frame.csv")).unwrap().lines().count(), 241);

    let shifted: String = fs::read_to_string(&gt)
        .unwrap()
        .lines()
        .map(|l| {
            let (t, rest) = l.split_once(' ').unwrap();
            format!("{} {rest}\n", t.parse::<f64>().unwrap() + 1000.0)
        })
        .collect();
    let est = tmp.path().join("shifted.tum");
    fs::write(&est, shifted).unwrap();
    let o = autoloop(&["eval", "--est", &s(&est), "--gt", &s(&gt), "--out", &s(&tmp.path().join("eval2"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_runs_reports_median() {
    let tmp = tempfile::tempdir().unwrap();
    let (scenes, db) = drift_inputs(tmp.path());
    let runs = tmp.path().join("runs");
    for seed in 0..3 {
        let o = autoloop(&[
            "train",
            "--scene",
            &s(&scenes.join("drift.scene.json")),
            "--db",
            &s(&db.join("loops.jsonl")),
            "--steps",
            "40",
            "--seed",
            &(seed + 10).to_string(),
            "--out",
            &s(&runs.join(format!("run{seed}"))),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let out = tmp.path().join("exp");
    let o = autoloop(&["eval", "--runs", &s(&runs), "--gt", &s(&scenes.join("drift.gt.tum")), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(report["completed"], 3);
    let seeds: Vec<u64> = report["runs"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![10, 11, 12]);
    let mut rmses: Vec<f64> = report["runs"].as_array().unwrap().iter().map(|r| r["report"]["rmse"].as_f64().unwrap()).collect();
    rmses.sort_by(f64::total_cmp);
    assert_eq!(report["median"]["rmse"].as_f64().unwrap(), rmses[1]);
}

#[test]
fn cost_prints_and_writes_total() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cost");
    let o = autoloop(&["cost", "--frames", "2000", "--scenes", "3", "--out", &s(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("2.82e10"));
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cost.json")).unwrap()).unwrap();
    assert_eq!(c["flops_per_scene"].as_f64(), Some(9.4e9));
    assert_eq!(c["total_flops"].as_f64(), Some(3.0 * 9.4e9));
}

#[test]
fn gen_scenes_is_byte_identical_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |dir: &str, seed: &str| {
        let out = tmp.path().join(dir);
        assert!(autoloop(&["gen-scenes", "--preset", "corpus", "--scenes", "2", "--seed", seed, "--out", &s(&out)]).status.success());
        ["line000.features", "circle001.gt.tum", "revisits.csv", "manifest.json"].map(|f| fs::read(out.join(f)).unwrap())
    };
    let (a, b, c) = (gen("a", "5"), gen("b", "5"), gen("c", "6"));
    assert_eq!(a, b);
    assert_ne!(a[0], c[0]);
}
