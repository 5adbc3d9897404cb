//! Drives every subcommand end to end on a tiny phantom cohort.

use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lconet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lconet")).args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "epochs": 2,
  "batch_size": 2,
  "steps_per_epoch": 1,
  "val_slices_per_epoch": 2,
  "train_fraction": 0.6,
  "val_fraction": 0.2,
  "net": {
    "input_size": 32, "num_classes": 4, "growth_rate": 8, "groups": 4,
    "condensation_factor": 2, "layers_per_block": [1, 1, 2, 1, 1],
    "initial_features": 8, "pool_layers": 2
  }
}"#;

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    run(&["phantom", "--count", "5", "--out", s(&data), "--seed", "3"]);
    assert!(data.join("manifest.json").exists());
    let cine = data.join("subject000_cine.vol");

    let roi_json = d.join("roi.json");
    let pgm = d.join("map.pgm");
    run(&["roi", "--in", s(&cine), "--out", s(&roi_json), "--pgm", s(&pgm)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&roi_json).unwrap()).unwrap();
    for key in ["center", "radius", "crop_corner"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n"));

    let params = d.join("params.json");
    let stdout = run(&[
        "params",
        "--ed",
        s(&data.join("subject000_ed.vol")),
        "--es",
        s(&data.join("subject000_es.vol")),
        "--out",
        s(&params),
    ]);
    assert!(stdout.starts_with("lv_edv_ml,"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&params).unwrap()).unwrap();
    assert!(r["ef_percent"].as_f64().unwrap() > 0.0);
    assert_eq!(std::fs::read_to_string(params.with_extension("csv")).unwrap().lines().count(), 2);

    let geom = d.join("geom.json");
    std::fs::write(&geom, r#"{"spacing_mm": [2.0, 2.0], "slice_thickness_mm": 10.0}"#).unwrap();
    run(&[
        "params",
        "--ed",
        s(&data.join("subject000_ed.vol")),
        "--es",
        s(&data.join("subject000_es.vol")),
        "--geom",
        s(&geom),
        "--out",
        s(&d.join("params2.json")),
    ]);

    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let ckpt = d.join("net.ckpt");
    run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(d.join("net_history.json").exists());

    let report = run(&["prune-report", "--ckpt", s(&ckpt), "--csv", s(&d.join("prune.csv"))]);
    assert!(report.contains("stage 1/1"), "{report}");
    assert!(std::fs::read_to_string(d.join("prune.csv")).unwrap().lines().count() > 1);

    let mask = d.join("mask.vol");
    run(&["segment", "--ckpt", s(&ckpt), "--in", s(&cine), "--out", s(&mask), "--frames", "0,8"]);
    let bytes = std::fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"{"));

    let csv = d.join("eval.csv");
    run(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 * 3);
    assert_eq!(std::fs::read_to_string(d.join("eval_clinical.csv")).unwrap().lines().count(), 1 + 5 * 5);
    assert!(d.join("eval_clinical_summary.csv").exists());
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.vol");
    let err = fails(&["roi", "--in", s(&missing), "--out", s(&d.join("x.json"))]);
    assert!(err.contains("missing.vol"), "{err}");

    let cfg = d.join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let err = fails(&["train", "--data", s(d), "--config", s(&cfg), "--out", s(&d.join("n.ckpt"))]);
    assert!(err.contains("epochz"), "{err}");

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    fails(&["prune-report", "--ckpt", s(&d.join("junk.ckpt"))]);
}
