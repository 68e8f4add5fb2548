use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn axial(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_axial"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const TINY: &str = r#"{
  "model": {"stem": "pointwise", "stem_channels": 8, "stage_blocks": [1], "stage_bottleneck": [8],
            "stage_strides": [1], "spans": {"local": 3}, "heads": 2, "num_classes": 2, "resolution": 8},
  "task": {"grid": 8, "d_min": 2},
  "train": {"steps": 4, "batch_size": 4, "train_samples": 32, "validation_samples": 16, "eval_every": 2},
  "seeds": {"model": 5}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn no_subcommand_prints_usage_and_exits_2() {
    let out = axial(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_names_the_token() {
    let out = axial(&["count", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--bogus-flag"));
}

#[test]
fn resnet50_totals_row() {
    let cfg = repo_config("resnet50.json");
    let out = axial(&["count", "--config", cfg.to_str().unwrap(), "--resolution", "224"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("total: 25.6M / 4.1B"), "{text}");
    assert!(text.starts_with("# config "), "{text}");
}

#[test]
fn json_output_embeds_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = axial(&["count", "--config", cfg.to_str().unwrap(), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["seed"], 5);
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 16);
    assert!(doc["report"]["total_params"].as_u64().unwrap() > 0);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"stepz": 1}}"#).unwrap();
    let out = axial(&["count", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
    let missing = axial(&["count", "--config", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn verify_reports_every_kernel() {
    let out = axial(&["verify", "--seeds", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.ends_with("PASS")).count(), 4, "{text}");
}

#[test]
fn sweep_and_bench_run() {
    let out = axial(&["sweep", "--resolution", "65", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("span,M-Adds"));
    let out = axial(&["bench", "--extent", "9", "--spans", "3,5", "--repetitions", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("# config "));
    let bad = axial(&["bench", "--spans", "4"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let (cfg_s, run_s) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    let out = axial(&["train", "--config", cfg_s, "--out", run_s, "--save-data"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let records = std::fs::read_to_string(run.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4);
    assert!(run.join("train-data.axck").exists() && run.join("validation-data.axck").exists());

    let ck = run.join("model.axck");
    let ck_s = ck.to_str().unwrap();
    let out = axial(&[
        "eval",
        "--checkpoint",
        ck_s,
        "--resolutions",
        "8,16",
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["report"]["per_resolution"].as_array().unwrap().len(), 2);

    let val = run.join("validation-data.axck");
    let eval_stored = axial(&[
        "eval",
        "--checkpoint",
        ck_s,
        "--data",
        val.to_str().unwrap(),
        "--format",
        "json",
    ]);
    let stored: serde_json::Value = serde_json::from_slice(&eval_stored.stdout).unwrap();
    assert_eq!(stored["report"]["accuracy"], doc["report"]["accuracy"]);

    let dump = dir.path().join("dump");
    let out = axial(&[
        "dump-attention",
        "--checkpoint",
        ck_s,
        "--layer",
        "stage1.block0.width",
        "--heads",
        "1",
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dump.join("index.json").exists());
    let missing = axial(&[
        "dump-attention",
        "--checkpoint",
        ck_s,
        "--layer",
        "nope",
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("stage1.block0.height"));

    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 9;
    bytes[last] ^= 1;
    let corrupt = dir.path().join("corrupt.axck");
    std::fs::write(&corrupt, bytes).unwrap();
    let out = axial(&["eval", "--checkpoint", corrupt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));
}

#[test]
fn same_config_trains_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let digest = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = axial(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--precision",
            "f64",
            "--format",
            "json",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        doc["report"]["checkpoint_digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest("a"), digest("b"));
}
