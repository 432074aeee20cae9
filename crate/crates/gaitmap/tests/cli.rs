//! Black-box tests of the command-line binary: artifact layout, exit codes,
//! the leakage guard, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gaitmap")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("failed to spawn gaitmap")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, subjects: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data_s{seed}"));
    ok(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--subjects",
        &subjects.to_string(),
        "--clips",
        "1",
        "--seed",
        &seed.to_string(),
    ]);
    out.join("manifest.json")
}

#[test]
fn simulate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let m1 = simulate(dir.path(), 6, 7);
    let b1 = std::fs::read(&m1).unwrap();
    let entries: serde_json::Value = serde_json::from_slice(&b1).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 6);

    let out2 = dir.path().join("again");
    ok(&["simulate", "--out", out2.to_str().unwrap(), "--subjects", "6", "--clips", "1", "--seed", "7"]);
    let b2 = std::fs::read(out2.join("manifest.json")).unwrap();
    assert_eq!(b1, b2, "same-seed manifests must be byte-identical");
    // A pose file too.
    let p1 = std::fs::read(m1.parent().unwrap().join("synth0000_clip0.jsonl")).unwrap();
    let p2 = std::fs::read(out2.join("synth0000_clip0.jsonl")).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn extract_writes_maps_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), 2, 3);
    let maps = dir.path().join("maps");
    ok(&["extract", "--manifest", manifest.to_str().unwrap(), "--out", maps.to_str().unwrap()]);
    let gmkm = std::fs::read(maps.join("synth0000_clip0_0.gmkm")).unwrap();
    // magic + version + T + F + 96*238 doubles.
    assert_eq!(gmkm.len(), 16 + 96 * 238 * 8);
    assert_eq!(&gmkm[..4], b"GMKM");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(maps.join("schema.json")).unwrap()).unwrap();
    let features = schema["features"].as_array().unwrap();
    assert_eq!(features.len(), 238);
    let count = |d: &str| features.iter().filter(|f| f["domain"] == d).count();
    assert_eq!(count("Motion"), 140);
    assert_eq!(count("SelfSkeleton"), 32);
    assert_eq!(count("CrossCorrelation"), 66);
}

#[test]
fn extract_corrupt_pose_file_fails_with_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), 2, 4);
    let pose = manifest.parent().unwrap().join("synth0001_clip0.jsonl");
    std::fs::write(&pose, "{not json\n").unwrap();
    let out = run(&[
        "extract",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("maps").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("parse") || stderr.contains("line"), "stderr: {stderr}");
}

#[test]
fn missing_manifest_exits_with_io_code() {
    let out = run(&["extract", "--manifest", "/nonexistent/manifest.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(3));
}

fn train_model(dir: &Path, manifest: &Path, name: &str, seed: u64) -> PathBuf {
    let model_dir = dir.join(name);
    ok(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--modalities",
        "knowledge-map",
        "--epochs",
        "1",
        "--seed",
        &seed.to_string(),
    ]);
    model_dir
}

#[test]
fn train_eval_explain_artifacts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = simulate(dir.path(), 6, 11);
    let splits = dir.path().join("splits");
    ok(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        splits.to_str().unwrap(),
        "--train-fraction",
        "0.7",
        "--seed",
        "1",
    ]);
    let train_manifest = splits.join("train_manifest.json");
    let test_manifest = splits.join("test_manifest.json");

    let m1 = train_model(dir.path(), &train_manifest, "model_a", 5);
    for artifact in ["model.gmlb", "config.json", "norm_stats.json", "loss.csv", "run_config.json"] {
        assert!(m1.join(artifact).exists(), "missing {artifact}");
    }
    let m2 = train_model(dir.path(), &train_manifest, "model_b", 5);
    for artifact in ["model.gmlb", "norm_stats.json", "loss.csv"] {
        assert_eq!(
            std::fs::read(m1.join(artifact)).unwrap(),
            std::fs::read(m2.join(artifact)).unwrap(),
            "{artifact} differs between identical runs"
        );
    }

    let eval1 = dir.path().join("eval1.json");
    ok(&[
        "eval",
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--model-dir",
        m1.to_str().unwrap(),
        "--out",
        eval1.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval1).unwrap()).unwrap();
    assert!(report["metrics"]["accuracy"].is_number());
    assert!(report["metrics"]["macro_f1"].is_number());
    assert!(report.get("leakage_acknowledged").is_none());
    let eval2 = dir.path().join("eval2.json");
    ok(&[
        "eval",
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--model-dir",
        m1.to_str().unwrap(),
        "--out",
        eval2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&eval1).unwrap(), std::fs::read(&eval2).unwrap());

    // Leakage guard: evaluating on the training manifest must exit 2 and
    // name an overlapping subject.
    let leak = dir.path().join("leak.json");
    let out = run(&[
        "eval",
        "--manifest",
        train_manifest.to_str().unwrap(),
        "--model-dir",
        m1.to_str().unwrap(),
        "--out",
        leak.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("synth"), "leakage error should name a subject: {stderr}");
    assert!(!leak.exists());

    // Override watermarks the report.
    ok(&[
        "eval",
        "--manifest",
        train_manifest.to_str().unwrap(),
        "--model-dir",
        m1.to_str().unwrap(),
        "--out",
        leak.to_str().unwrap(),
        "--allow-leakage",
    ]);
    let leaked: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&leak).unwrap()).unwrap();
    assert_eq!(leaked["leakage_acknowledged"], true);

    // Explain writes a JSON/CSV/SVG trio per clip.
    let reports = dir.path().join("reports");
    ok(&[
        "explain",
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--model-dir",
        m1.to_str().unwrap(),
        "--out",
        reports.to_str().unwrap(),
    ]);
    let mut stems = std::collections::BTreeSet::new();
    for entry in std::fs::read_dir(&reports).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() != "run_config.json" {
            stems.insert(p.file_stem().unwrap().to_owned());
        }
    }
    for stem in &stems {
        for ext in ["json", "csv", "svg"] {
            assert!(reports.join(stem).with_extension(ext).exists());
        }
    }
    assert!(!stems.is_empty());
}
