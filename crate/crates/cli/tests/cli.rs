use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pulsestress_core::ingest::{write_subject, SubjectRecord};
use pulsestress_core::synth::synth_subject;
use tempfile::TempDir;

struct Workspace {
    root: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            root: tempfile::tempdir().unwrap(),
        };
        fs::create_dir(ws.data()).unwrap();
        ws
    }

    fn data(&self) -> PathBuf {
        self.root.path().join("data")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn add(&self, record: &SubjectRecord) {
        write_subject(
            record,
            self.data().join(format!("{}.csv", record.subject_id)),
        )
        .unwrap();
    }

    fn add_synthetic(&self, n: usize) {
        for i in 0..n {
            let id = format!("S{}", i + 2);
            self.add(&synth_subject(
                &id,
                &[(1, 90.0), (2, 90.0), (3, 90.0)],
                100 + i as u64,
            ));
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_pulsestress"))
            .current_dir(self.root.path())
            .env_remove("PULSESTRESS_CACHE")
            .env("RUST_LOG", "info")
            .args(["--data-dir", "data", "--cache-dir", "cache", "--out", "out"])
            .args(args)
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn feature_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn validate_data_reports_each_subject() {
    let ws = Workspace::new();
    ws.add_synthetic(2);
    let o = ws.run(&["validate-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("S2") && out.contains("S3"), "{out}");
    assert!(out.contains("5760"), "90 s of label 1 at 64 Hz: {out}");
    assert!(out.contains("2 subject file(s), 0 invalid"), "{out}");
}

#[test]
fn validate_data_fails_on_empty_directory() {
    let ws = Workspace::new();
    let o = ws.run(&["validate-data"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no subjects found"), "{}", stderr(&o));
}

#[test]
fn validate_data_names_corrupt_file() {
    let ws = Workspace::new();
    ws.add_synthetic(1);
    fs::write(ws.data().join("S9.csv"), "# fs=64\n1.0,1\nabc,1\n").unwrap();
    let o = ws.run(&["validate-data"]);
    assert!(!o.status.success());
    let out = stdout(&o);
    assert!(out.contains("S9.csv") && out.contains("row 2"), "{out}");
    assert!(out.contains("S2"), "valid subjects are still listed: {out}");
}

#[test]
fn preprocess_caches_and_segments() {
    let ws = Workspace::new();
    ws.add(&synth_subject("S2", &[(2, 70.0)], 1));
    ws.add(&SubjectRecord::new("S3", 64, vec![1.0; 6400], vec![1; 6400]).unwrap());

    let first = ws.run(&[
        "preprocess",
        "--task",
        "3class",
        "--dump-coeffs",
        "coeffs.csv",
    ]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(!stdout(&first).contains("cache hit"));
    assert!(
        stderr(&first).contains("S3: dropped 9 of 9"),
        "{}",
        stderr(&first)
    );

    let features = ws.path("cache/3class/features.csv");
    assert_eq!(feature_rows(&features), 3);
    let csv = fs::read_to_string(&features).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("S2,")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("cache/3class/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subjects"][1]["kept"], 0);
    assert_eq!(manifest["subjects"][1]["dropped"], 9);
    assert_eq!(
        fs::read_to_string(ws.path("coeffs.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let second = ws.run(&["preprocess", "--task", "3class"]);
    assert!(second.status.success());
    assert!(stdout(&second).contains("cache hit"), "{}", stdout(&second));

    ws.add(&synth_subject("S4", &[(2, 70.0)], 2));
    let third = ws.run(&["preprocess", "--task", "3class"]);
    assert!(!stdout(&third).contains("cache hit"));
    assert_eq!(feature_rows(&features), 6);
}

#[test]
fn loso_without_cache_explains_next_step() {
    let ws = Workspace::new();
    ws.add_synthetic(4);
    let o = ws.run(&["loso", "--task", "2class"]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("pulsestress preprocess --task 2class"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn loso_is_deterministic_and_writes_artifacts() {
    let ws = Workspace::new();
    ws.add_synthetic(5);
    let pre = ws.run(&["preprocess"]);
    assert!(pre.status.success(), "{}", stderr(&pre));

    let args = [
        "loso",
        "--epochs",
        "3",
        "--patience",
        "1",
        "--batch-size",
        "32",
        "--seed",
        "7",
    ];
    let o = ws.run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(
        out.contains("Feat. Den."),
        "hcnn summary shows the feature branch: {out}"
    );
    assert!(out.contains("published: accuracy 75.21%"), "{out}");

    let metrics_path = ws.path("out/metrics.json");
    let first = fs::read(&metrics_path).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["folds"].as_array().unwrap().len(), 5);
    assert_eq!(m["pooled"]["n_samples"], 5 * 21);
    for i in 2..=6 {
        assert!(ws.path(&format!("out/checkpoints/S{i}.pst")).exists());
    }

    let again = ws.run(&[&args[..], &["--workers", "1"]].concat());
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(
        first,
        fs::read(&metrics_path).unwrap(),
        "same seed gives identical metrics"
    );
}

#[test]
fn loso_cnn_summary_has_no_feature_branch() {
    let ws = Workspace::new();
    ws.add_synthetic(4);
    assert!(ws.run(&["preprocess", "--task", "2class"]).status.success());
    let o = ws.run(&[
        "loso",
        "--task",
        "2class",
        "--variant",
        "cnn",
        "--epochs",
        "2",
        "--patience",
        "1",
        "--batch-size",
        "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Out. Den.") && !out.contains("Feat."), "{out}");
    assert!(
        !out.contains("published"),
        "no absolute 2-class reference: {out}"
    );
}

fn metrics_fixture(ws: &Workspace) -> PathBuf {
    ws.add_synthetic(4);
    assert!(ws.run(&["preprocess", "--task", "2class"]).status.success());
    let o = ws.run(&[
        "loso",
        "--task",
        "2class",
        "--epochs",
        "2",
        "--patience",
        "1",
        "--batch-size",
        "64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    ws.path("out/metrics.json")
}

#[test]
fn report_builds_table_and_chart() {
    let ws = Workspace::new();
    let metrics = metrics_fixture(&ws);
    let copy = ws.path("second.json");
    fs::copy(&metrics, &copy).unwrap();

    let o = ws.run(&[
        "report",
        "--out",
        "rep",
        metrics.to_str().unwrap(),
        copy.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(ws.path("rep/report.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="group""#).count(), 2);
    assert_eq!(feature_rows(&ws.path("rep/report.csv")), 2);

    let o = ws.run(&["report", "--out", "rep1", metrics.to_str().unwrap()]);
    assert!(o.status.success());
    let svg = fs::read_to_string(ws.path("rep1/report.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="group""#).count(), 1);

    let mut value: serde_json::Value =
        serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    value["schema_version"] = 99.into();
    let future = ws.path("future.json");
    fs::write(&future, serde_json::to_vec(&value).unwrap()).unwrap();
    let o = ws.run(&["report", future.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema_version 99"), "{}", stderr(&o));
}

#[test]
fn report_rejects_malformed_json() {
    let ws = Workspace::new();
    let bad = ws.path("broken.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = ws.run(&["report", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));
}

#[test]
fn cache_dir_comes_from_environment_unless_flagged() {
    let ws = Workspace::new();
    ws.add(&synth_subject("S2", &[(2, 70.0)], 1));
    let o = Command::new(env!("CARGO_BIN_EXE_pulsestress"))
        .current_dir(ws.root.path())
        .env("PULSESTRESS_CACHE", "envcache")
        .args(["--data-dir", "data", "preprocess"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path("envcache/3class/manifest.json").exists());
}
