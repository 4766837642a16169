use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn roll(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roll"))
        .arg("--data-root")
        .arg(root)
        .args(args)
        .env_remove("ROLL_DATA_ROOT")
        .output()
        .expect("roll runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(roll(dir, &args));
}

fn small(dir: &Path) {
    synth(dir, &["--episodes", "4", "--scenes-per-episode", "3"]);
}

#[test]
fn eval_on_keyword_fixture_meets_threshold() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let json: Value = serde_json::from_str(&ok(roll(
        dir.path(),
        &["eval", "--json", "--assert-min-accuracy", "0.95", "--jobs", "2"],
    )))
    .unwrap();
    assert_eq!(json["overall"]["total"], 400);
    assert!(json["overall"]["accuracy"].as_f64().unwrap() >= 0.95);
    assert_eq!(json["samples"].as_array().unwrap().len(), 400);
}

#[test]
fn stripped_fixture_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--stripped"]);
    let json: Value = serde_json::from_str(&ok(roll(dir.path(), &["eval", "--json"]))).unwrap();
    let acc = json["overall"]["accuracy"].as_f64().unwrap();
    let half = 1.96 * (0.25f64 * 0.75 / 400.0).sqrt();
    assert!((acc - 0.25).abs() <= half, "accuracy {acc}");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let a = ok(roll(dir.path(), &["eval", "--json", "--jobs", "1"]));
    let b = ok(roll(dir.path(), &["eval", "--json", "--jobs", "3"]));
    assert_eq!(a, b);
}

#[test]
fn accuracy_gate_fails_the_process() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let out = roll(
        dir.path(),
        &["eval", "--branches", "read", "--assert-min-accuracy", "0.99"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("below the required"));
}

#[test]
fn ablation_emits_seven_reports() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let json: Value = serde_json::from_str(&ok(roll(dir.path(), &["eval", "--ablation", "--json"]))).unwrap();
    let reports = json.as_array().unwrap();
    assert_eq!(reports.len(), 7);
    let branches: Vec<&str> = reports.iter().map(|r| r["branches"].as_str().unwrap()).collect();
    assert_eq!(
        branches,
        [
            "read",
            "observe",
            "recall",
            "read+observe",
            "read+recall",
            "observe+recall",
            "read+observe+recall"
        ]
    );
    let text = ok(roll(dir.path(), &["eval", "--ablation"]));
    assert_eq!(text.lines().count(), 8);
}

#[test]
fn config_file_and_flags_select_branches() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let cfg = dir.path().join("roll.toml");
    std::fs::write(
        &cfg,
        "branches = \"read+observe\"\n\n[window]\nwindow = 100\nstride = 50\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let json: Value = serde_json::from_str(&ok(roll(dir.path(), &["--config", cfg, "eval", "--json"]))).unwrap();
    assert_eq!(json["branches"], "read+observe");
    assert_eq!(json["config"]["window"]["window"], 100);
    assert!(json["samples"][0]["scores"]["recall"].is_null());
    let json: Value = serde_json::from_str(&ok(roll(
        dir.path(),
        &["--config", cfg, "eval", "--json", "--branches", "recall"],
    )))
    .unwrap();
    assert_eq!(json["branches"], "recall");
}

#[test]
fn scene_commands_agree_with_each_other() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let scene = "s01e02_sc01";
    let graph = dir.path().join("graph.json");
    ok(roll(
        dir.path(),
        &["graph", "--scene", scene, "--out", graph.to_str().unwrap()],
    ));
    let from_scene = ok(roll(dir.path(), &["describe", "--scene", scene]));
    let from_graph = ok(roll(dir.path(), &["describe", "--graph", graph.to_str().unwrap()]));
    assert_eq!(from_scene, from_graph);
    assert!(from_scene.trim_end().ends_with('.'));

    let place: Value = serde_json::from_str(&ok(roll(dir.path(), &["place", "--scene", scene]))).unwrap();
    let g: Value = serde_json::from_str(&std::fs::read_to_string(&graph).unwrap()).unwrap();
    assert_eq!(place["label"], g["place"]);

    let chars: Value = serde_json::from_str(&ok(roll(dir.path(), &["characters", "--scene", scene]))).unwrap();
    let names: Vec<&String> = chars["characters"]["boxes"].as_object().unwrap().keys().collect();
    let graph_names: Vec<&str> = g["characters"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(names, graph_names);

    let recall: Value = serde_json::from_str(&ok(roll(
        dir.path(),
        &[
            "recall",
            "--scene",
            scene,
            "--wl",
            "50",
            "--stride",
            "25",
            "--max-segments",
            "3",
        ],
    )))
    .unwrap();
    assert_eq!(recall["episode_id"], "s01e02");
    assert_eq!(recall["segments"]["segments"].as_array().unwrap().len(), 3);
}

#[test]
fn train_fusion_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let out = dir.path().join("trained");
    let out_s = out.to_str().unwrap();
    let log = ok(roll(
        dir.path(),
        &["train-fusion", "--method", "fc", "--epochs", "2", "--out", out_s],
    ));
    assert!(log.contains("epoch   2"));
    for f in ["read.bin", "observe.bin", "recall.bin", "fusion.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let head = out.join("fusion.json");
    let json: Value = serde_json::from_str(&ok(roll(
        dir.path(),
        &[
            "eval",
            "--json",
            "--heads",
            out_s,
            "--fusion-head",
            head.to_str().unwrap(),
        ],
    )))
    .unwrap();
    assert_eq!(json["fusion"], "fc");

    // Learned methods cannot be requested without parameters.
    let refused = roll(dir.path(), &["eval", "--fusion", "self-att"]);
    assert!(!refused.status.success());
}

#[test]
fn fuse_accepts_scores_or_a_sample() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.json");
    std::fs::write(
        &scores,
        r#"{"scores": {"read": [0.1, 0.9, 0.3], "observe": [0.5, 0.2, 0.4], "recall": [0.7, 0.1, 0.8]}}"#,
    )
    .unwrap();
    let fused: Value = serde_json::from_str(&ok(roll(
        dir.path(),
        &["fuse", "--fusion", "maximum", "--scores", scores.to_str().unwrap()],
    )))
    .unwrap();
    assert_eq!(fused["prediction"], 1);
    assert_eq!(fused["omega"], serde_json::json!([0.7, 0.9, 0.8]));

    small(dir.path());
    let rec: Value = serde_json::from_str(&ok(roll(dir.path(), &["fuse", "--sample", "s01e01_sc01_q1"]))).unwrap();
    assert_eq!(rec["sample_id"], "s01e01_sc01_q1");
    assert_eq!(rec["omega"].as_array().unwrap().len(), 4);
}

#[test]
fn helpful_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = roll(dir.path(), &["eval"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("loading"));

    small(dir.path());
    let bad_backend = roll(dir.path(), &["--backend", "gpu", "eval"]);
    assert!(!bad_backend.status.success());
    let bad_scene = roll(dir.path(), &["describe", "--scene", "nope"]);
    assert!(!bad_scene.status.success());
    let bad_branches = roll(dir.path(), &["eval", "--branches", "vision"]);
    assert!(!bad_branches.status.success());
}
