use std::path::Path;
use std::process::{Command, Output};

fn pendepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pendepth")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pendepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small model and dataset shared by the tests below.
fn dataset(dir: &Path) {
    let model = dir.join("model.penm");
    ok(&["gen-model", "--seed", "3", "--vertices", "200", "--shape-dim", "4", "--expr-dim", "2", "--out", s(&model)]);
    ok(&[
        "gen-data", "--model", s(&model), "--out", s(&dir.join("data")), "--subjects", "3", "--images", "3",
        "--seed", "2", "--size", "64", "--downsample", "1",
    ]);
}

#[test]
fn passthrough_pipeline_identifies_everyone() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (model, data, pen) = (dir.path().join("model.penm"), dir.path().join("data"), dir.path().join("pen"));
    ok(&[
        "normalize", "--model", s(&model), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&pen),
        "--estimator", "passthrough", "--size", "64",
    ]);
    assert!(pen.join("s0000_000.pen.pgm").is_file());
    let audit = std::fs::read_to_string(pen.join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 9);
    assert!(audit.lines().all(|l| l.contains("\"ok\":true")));

    let json = dir.path().join("ident.json");
    let table = ok(&[
        "identify", "--gallery", s(&pen.join("gallery.tsv")), "--probes", s(&pen.join("probes.tsv")),
        "--json", s(&json),
    ]);
    assert!(table.contains("rank-1"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["rank1"], 1.0);
}

#[test]
fn identical_estimates_have_zero_rmse() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (model, data) = (dir.path().join("model.penm"), dir.path().join("data"));
    let json = dir.path().join("rec.json");
    ok(&[
        "reconstruct-eval", "--model", s(&model), "--gt", s(&data.join("params.tsv")), "--est",
        s(&data.join("params.tsv")), "--json", s(&json), "--table", s(&dir.path().join("rec.txt")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["rmse"], 0.0);
    assert_eq!(report["n_samples"], 9);
}

#[test]
fn probe_without_gallery_identity_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.feat"), "1\n0\n0\n").unwrap();
    std::fs::write(d.join("b.feat"), "0\n1\n0\n").unwrap();
    std::fs::write(d.join("gallery.tsv"), "alice\ta.feat\n").unwrap();
    std::fs::write(d.join("probes.tsv"), "alice\ta.feat\nmallory\tb.feat\n").unwrap();
    let out = pendepth(&["identify", "--gallery", s(&d.join("gallery.tsv")), "--probes", s(&d.join("probes.tsv"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mallory"), "{err}");
}

#[test]
fn failing_items_are_audited_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let (model, data, pen) = (dir.path().join("model.penm"), dir.path().join("data"), dir.path().join("pen"));
    let out = pendepth(&[
        "normalize", "--model", s(&model), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&pen),
        "--estimator", "external:exit 3", "--size", "64",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("9 of 9 items failed"));
    let audit = std::fs::read_to_string(pen.join("audit.jsonl")).unwrap();
    assert!(audit.lines().all(|l| l.contains("\"stage\":\"estimate\"")), "{audit}");
}

#[test]
fn bad_flags_exit_with_usage_error() {
    assert_eq!(pendepth(&["gen-model", "--vertices", "many", "--out", "x"]).status.code(), Some(2));
    assert_eq!(pendepth(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let help = ok(&["gen-data", "--help"]);
    assert!(help.contains("[default: 40]"), "{help}");
    assert!(help.contains("[default: 60]"), "{help}");
}

#[test]
fn explicit_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let d = dir.path();
    let cfg = d.join("pendepth.toml");
    std::fs::write(&cfg, "model = \"model.penm\"\nestimator = \"passthrough\"\nthreads = 0\n").unwrap();
    let (manifest, pen) = (d.join("data").join("manifest.jsonl"), d.join("pen"));
    let args = ["normalize", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&pen), "--size", "64"];

    // threads = 0 from the config is rejected...
    let out = pendepth(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads"));

    // ...unless the flag overrides it; the estimator still comes from the file.
    let mut with_flag = args.to_vec();
    with_flag.extend(["--threads", "2"]);
    ok(&with_flag);
    let audit = std::fs::read_to_string(pen.join("audit.jsonl")).unwrap();
    assert!(audit.contains("\"estimator\":\"passthrough\""), "{audit}");
}
