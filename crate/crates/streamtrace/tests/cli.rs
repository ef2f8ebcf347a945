//! End-to-end tests of the `streamtrace` binary: artifact layout, exit
//! codes, and determinism under a fixed seed.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamtrace"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Build a small straight phantom in `dir` and return its subdirectory.
fn make_phantom(dir: &Path) -> std::path::PathBuf {
    let spec = r#"{"kind":"straight","dims":[24,24,12],"n_ground_truth":12,"rng_seed":3}"#;
    std::fs::write(dir.join("spec.json"), spec).unwrap();
    let out = run(dir, &["phantom", "--spec", "spec.json", "--out", "ph"]);
    assert_code(&out, 0);
    dir.join("ph")
}

#[test]
fn compare_tractogram_with_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    let truth = ph.join("truth.tck");
    let truth = truth.to_str().unwrap();
    let out = run(
        tmp.path(),
        &["compare", truth, truth, "--out", "self.json"],
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(tmp.path().join("self.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["stats"]["mean_mm"].as_f64().unwrap(), 0.0);
    assert_eq!(report["stats"]["median_mm"].as_f64().unwrap(), 0.0);
    assert_eq!(report["stats"]["outlier_fraction"].as_f64().unwrap(), 0.0);
}

#[test]
fn compare_is_not_symmetric_between_subset_and_superset() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    // A strict subset of B finds every ball occupied; B has seeds with no
    // A streamline nearby, so the reverse direction reports drop-outs.
    let full = streamtrace::tracts::read_tck(ph.join("truth.tck")).unwrap();
    let half = streamtrace::tracts::Tractogram {
        streamlines: full.streamlines[..4].to_vec(),
        space_note: full.space_note.clone(),
    };
    streamtrace::tracts::write_tck(&half, tmp.path().join("half.tck")).unwrap();
    let truth = ph.join("truth.tck");
    let truth = truth.to_str().unwrap();
    let fwd = run(
        tmp.path(),
        &["compare", "half.tck", truth, "--out", "fwd.json"],
    );
    let rev = run(
        tmp.path(),
        &["compare", truth, "half.tck", "--out", "rev.json"],
    );
    assert_code(&fwd, 0);
    assert_code(&rev, 0);
    let read = |name: &str| -> serde_json::Value {
        let text = std::fs::read_to_string(tmp.path().join(name)).unwrap();
        serde_json::from_str(&text).unwrap()
    };
    let fwd = read("fwd.json")["stats"]["outlier_fraction"]
        .as_f64()
        .unwrap();
    let rev = read("rev.json")["stats"]["outlier_fraction"]
        .as_f64()
        .unwrap();
    assert_eq!(fwd, 0.0, "subset queries all resolved");
    assert!(rev > 0.0, "superset queries include unmatched seeds");
}

#[test]
fn sample_larger_than_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    let truth = ph.join("truth.tck");
    let truth = truth.to_str().unwrap();
    let out = run(
        tmp.path(),
        &["compare", truth, truth, "--sample", "100000", "--out", "x.json"],
    );
    assert_code(&out, 1);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["compare", "--bogus"]);
    assert_code(&out, 1);
}

#[test]
fn track_requires_exactly_one_predictor_source() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    let mask = ph.join("mask.nii");
    let mask = mask.to_str().unwrap();
    let out = run(tmp.path(), &["track", "--mask", mask]);
    assert_code(&out, 1);
}

#[test]
fn malformed_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("junk.tck"), b"not a tractogram").unwrap();
    let out = run(
        tmp.path(),
        &["compare", "junk.tck", "junk.tck", "--out", "x.json"],
    );
    assert_code(&out, 2);
}

#[test]
fn field_tracking_is_deterministic_and_writes_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    std::fs::write(
        tmp.path().join("tcfg.json"),
        r#"{"min_length": 5.0, "target_count": 10, "batch_size": 8, "rng_seed": 1}"#,
    )
    .unwrap();
    let field = ph.join("field.nii");
    let mask = ph.join("mask.nii");
    let args = |out: &str| {
        vec![
            "track".to_string(),
            "--field".into(),
            field.display().to_string(),
            "--mask".into(),
            mask.display().to_string(),
            "--config".into(),
            "tcfg.json".into(),
            "--out".into(),
            out.into(),
        ]
    };
    for name in ["a.tck", "b.tck"] {
        let out = bin()
            .current_dir(tmp.path())
            .args(args(name))
            .output()
            .unwrap();
        assert_code(&out, 0);
    }
    let bytes = |n: &str| std::fs::read(tmp.path().join(n)).unwrap();
    assert_eq!(bytes("a.tck"), bytes("b.tck"), "same seed, same tracks");
    assert_eq!(bytes("a.seeds"), bytes("b.seeds"));
    assert!(tmp.path().join("a.log.json").exists());
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.log.json")).unwrap())
            .unwrap();
    assert!(log["total_accepted"].as_u64().unwrap() >= 10);
    assert_eq!(log["config"]["rng_seed"].as_u64().unwrap(), 1);
}

#[test]
fn resume_is_rejected_with_a_clear_message() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("data/train/s1")).unwrap();
    let out = run(
        tmp.path(),
        &["train-teacher", "data", "--resume", "w.weights"],
    );
    assert_code(&out, 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--resume"), "stderr: {err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = make_phantom(tmp.path());
    std::fs::write(
        tmp.path().join("bad.json"),
        r#"{"min_length_mm": 5.0}"#,
    )
    .unwrap();
    let field = ph.join("field.nii");
    let mask = ph.join("mask.nii");
    let out = run(
        tmp.path(),
        &[
            "track",
            "--field",
            field.to_str().unwrap(),
            "--mask",
            mask.to_str().unwrap(),
            "--config",
            "bad.json",
        ],
    );
    assert_code(&out, 2);
}

#[test]
fn gradcheck_reports_numeric_failure_when_corrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = run(tmp.path(), &["gradcheck", "--seed", "7"]);
    assert_code(&ok, 0);
    let bad = run(tmp.path(), &["gradcheck", "--seed", "7", "--corrupt"]);
    assert_code(&bad, 3);
}
