use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 4
[world]
kind = "B"
samples_per_state = 300
[structure]
c_out = 5.0
c_in = 5.0
pb_dim = 0
[structure.probe]
epochs = 3
optimizer = "adam"
learning_rate = 0.003
mask_source = "all"
[structure.final_train]
epochs = 3
optimizer = "adam"
learning_rate = 0.003
[train]
epochs = 3
optimizer = "adam"
learning_rate = 0.003
[online]
mode = "w_only"
min_start = 5
buffer_capacity = 20
[iter]
iterations = 5
[estimate]
hidden = ["theta"]
[simulate]
command_group = "l"
[[simulate.constraints.terms]]
kind = "magnitude"
group = "f"
weight = 0.1
[detect]
mask = "110"
calibration = 100
[control]
control_group = "l"
[[control.loss.terms]]
kind = "target_match"
group = "theta"
target = [0.2, -0.1]
weight = 1.0
"#;

fn gemuco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemuco"))
        .current_dir(dir)
        .env("GEMUCO_THREADS", "1")
        .args(args)
        .output()
        .expect("run gemuco")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gemuco(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn collect_writes_rows_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--world", "B", "--seed", "9", "--out-dir", "c", "collect", "--n", "25"]);
    let csv = fs::read_to_string(d.join("c/data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);
    let m = manifest(&d.join("c"));
    assert_eq!(m["command"], "collect");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o["path"].as_str().unwrap().ends_with("data.csv")));

    ok(d, &["--world", "B", "--seed", "9", "--out-dir", "c2", "collect", "--n", "25"]);
    assert_eq!(csv, fs::read_to_string(d.join("c2/data.csv")).unwrap());
}

#[test]
fn bad_config_exits_with_code_two_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "seed = 1\n[world]\nkind = \"B\"\nsamples = 3\n").unwrap();
    let out = gemuco(d, &["--config", "bad.toml", "collect"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(err.contains("bad.toml"), "{err}");

    let out = gemuco(d, &["--config", "missing.toml", "collect"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("b.toml"), CONFIG).unwrap();
    let cfg = ["--config", "b.toml"];
    let with = |extra: &[&str]| -> Vec<String> {
        cfg.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |extra: &[&str]| {
        let args = with(extra);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(d, &refs)
    };

    run(&["--out-dir", "data", "collect"]);
    run(&["--out-dir", "det", "determine", "--data", "data/data.csv"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("det/report.json")).unwrap()).unwrap();
    assert!(report.is_object());

    run(&["--out-dir", "t1", "train", "--data", "data/data.csv", "--report", "det/report.json"]);
    run(&["--out-dir", "t2", "train", "--data", "data/data.csv", "--report", "det/report.json"]);
    let a = fs::read(d.join("t1/model.json")).unwrap();
    assert_eq!(a, fs::read(d.join("t2/model.json")).unwrap());
    let m1 = manifest(&d.join("t1"));
    let m2 = manifest(&d.join("t2"));
    assert_eq!(m1["outputs"][0]["sha256"], m2["outputs"][0]["sha256"]);
    assert_eq!(m1["config_sha256"], m2["config_sha256"]);

    let model = ["--model", "t1/model.json"];
    let data = ["--data", "data/data.csv"];
    run(&[&["--out-dir", "est", "estimate"][..], &model, &data].concat());
    let est = fs::read_to_string(d.join("est/estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), 301);

    run(&[&["--out-dir", "ctl", "control"][..], &model].concat());
    assert!(d.join("ctl/control.json").exists());

    run(&[&["--out-dir", "sim", "simulate"][..], &model, &data].concat());
    assert!(d.join("sim/simulation.csv").exists());

    run(&[&["--out-dir", "anom", "detect"][..], &model, &data].concat());
    assert!(d.join("anom/detector.json").exists());

    run(&[&["--out-dir", "ad", "adapt"][..], &model, &data].concat());
    assert!(d.join("ad/model.json").exists());
}

#[test]
fn eval_runs_a_named_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["--out-dir", "ev", "eval", "--scenario", "gradient_check"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[PASS]"), "{text}");

    fs::write(d.join("e.toml"), "[world]\nkind = \"A\"\n[eval]\ngradient_cases = 10\n").unwrap();
    let out = gemuco(d, &["--config", "e.toml", "--out-dir", "ev1", "eval", "--scenario", "gradient_check"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
    let out = gemuco(d, &["--out-dir", "ev2", "eval", "--scenario", "nope"]);
    assert!(!out.status.success());
}
