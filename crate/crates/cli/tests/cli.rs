use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqmri"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

const TINY: &str = r#"{
  "phantom": {"extent": 16, "seed": 3},
  "split": {"counts": {"train": 6, "val": 3, "test": 3}},
  "dataset_size": 12,
  "train": {
    "extent": 16, "steps": 2, "epochs": 1, "batch_size": 2,
    "recon_widths": [2, 2, 2, 2],
    "sampler": {"mlp_hidden": 8, "mlp_layers": 3, "unet_widths": [2, 2, 2, 2]}
  }
}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn datagen(cfg: &Path, out: &Path) -> PathBuf {
    let v = ok(&["datagen", "--config", s(cfg), "--out", s(out)]);
    assert_eq!(v["images"], 12);
    PathBuf::from(v["dataset"].as_str().unwrap())
}

#[test]
fn datagen_train_eval_compare_round_trip() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let ds = datagen(&cfg, &root.join("data"));
    assert!(root.join("data/dataset.sqds.meta.json").exists());

    let v = ok(&["train", "--config", s(&cfg), "--dataset", s(&ds), "--out", s(&root.join("run"))]);
    let ckpt = PathBuf::from(v["checkpoint"].as_str().unwrap());
    for f in ["model.ckpt", "train_log.jsonl", "config.json"] {
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(root.join("run").join(format!("{f}.meta.json"))).unwrap()).unwrap();
        assert_eq!(meta["config_hash"], v["config_hash"]);
    }
    let log = std::fs::read_to_string(root.join("run/train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);

    let ev = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--dataset", s(&ds), "--out", s(&root.join("eval")), "--dump", "1",
    ]);
    assert_eq!(ev["images"], 3);
    let csv = std::fs::read_to_string(root.join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let trace = std::fs::read_dir(root.join("eval"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("trace directory");
    assert!(trace.join("step0_mask.pgm").exists());
    assert!(trace.join("step2_recon.pgm").exists());

    let m = root.join("eval/metrics.csv");
    let c = ok(&["compare", "--a", s(&m), "--b", s(&m), "--out", s(&root.join("cmp"))]);
    assert_eq!(c["percent_a_better"], 50.0);
    assert_eq!(c["p_value"], 1.0);
    for f in ["comparison.json", "comparison.csv", "relative_ssim_histogram.csv"] {
        assert!(root.join("cmp").join(f).exists());
        assert!(root.join("cmp").join(format!("{f}.meta.json")).exists());
    }
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let (dir, cfg) = setup();
    let ds = datagen(&cfg, &dir.path().join("data"));
    let mut bytes = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        ok(&["train", "--config", s(&cfg), "--dataset", s(&ds), "--out", s(&out)]);
        bytes.push((
            std::fs::read(out.join("model.ckpt")).unwrap(),
            std::fs::read(out.join("train_log.jsonl")).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn outputs_are_never_overwritten() {
    let (dir, cfg) = setup();
    let out = dir.path().join("data");
    datagen(&cfg, &out);
    let before = std::fs::read(out.join("dataset.sqds")).unwrap();
    let err = error_line(&run(&["datagen", "--config", s(&cfg), "--out", s(&out), "--seed-override", "9"]));
    assert_eq!(err["error"], "exists");
    assert_eq!(std::fs::read(out.join("dataset.sqds")).unwrap(), before);
}

#[test]
fn overrides_change_the_config_hash() {
    let (dir, cfg) = setup();
    let a = ok(&["datagen", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    let b = ok(&["datagen", "--config", s(&cfg), "--out", s(&dir.path().join("b")), "--seed-override", "5"]);
    assert_ne!(a["config_hash"], b["config_hash"]);
    let da = std::fs::read(dir.path().join("a/dataset.sqds")).unwrap();
    let db = std::fs::read(dir.path().join("b/dataset.sqds")).unwrap();
    assert_ne!(da, db);
}

#[test]
fn errors_are_single_line_json() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 1, "momentum": 0.9}}"#).unwrap();
    let e = error_line(&run(&["datagen", "--config", s(&bad), "--out", s(dir.path())]));
    assert_eq!(e["error"], "json");
    assert!(e["message"].as_str().unwrap().contains("momentum"));

    let e = error_line(&run(&["train", "--out", "x"]));
    assert_eq!(e["error"], "usage");

    let e = error_line(&run(&["datagen", "--mode", "spiral", "--out", s(dir.path())]));
    assert_eq!(e["error"], "usage");

    let missing = dir.path().join("nope.sqds");
    let e = error_line(&run(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("r"))]));
    assert_eq!(e["error"], "io");

    let e = error_line(&run(&["datagen", "--accel", "0.5", "--out", s(dir.path())]));
    assert_eq!(e["error"], "core");
}

#[test]
fn gradcheck_passes_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out", s(dir.path())]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(stdout.contains("episode_point") && stdout.contains("episode_line"));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn ablate_emits_three_by_two_grid() {
    let (dir, cfg) = setup();
    let ds = datagen(&cfg, &dir.path().join("data"));
    let out = dir.path().join("ablate");
    let cells = ok(&["ablate", "--config", s(&cfg), "--dataset", s(&ds), "--out", s(&out)]);
    assert_eq!(cells.as_array().unwrap().len(), 6);
    let grid = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = grid.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ["steps", "codesign_on", "codesign_off"]);
    for (row, steps) in rows[1..].iter().zip(["1", "2", "4"]) {
        assert_eq!(row.len(), 3);
        assert_eq!(row[0], steps);
        for v in &row[1..] {
            let x: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&x));
        }
    }
    assert!(out.join("ablation.json.meta.json").exists());
    assert!(out.join("steps4_codesign_off/model.ckpt").exists());
}
