use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn model() -> PathBuf {
    scenarios().join("two_machine_three_bus.json")
}

fn fault() -> PathBuf {
    scenarios().join("fault_0p2s.json")
}

fn run(sub: &str, model: &Path, scenario: Option<&Path>, out: &Path, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lvrtcsr"));
    cmd.arg(sub).arg("--model").arg(model).arg("--out").arg(out);
    if let Some(s) = scenario {
        cmd.arg("--scenario").arg(s);
    }
    cmd.args(extra).output().expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const THREE_MACHINE: &str = r#"{
  "base_mva": 100.0,
  "buses": [
    { "id": 1 }, { "id": 2 }, { "id": 3 },
    { "id": 4, "load_p": 0.2, "is_rg": true, "rg_p": 0.2, "lvrt_max": 0.85 }
  ],
  "branches": [
    { "from": 1, "to": 4, "reactance_x": 0.3 },
    { "from": 2, "to": 4, "reactance_x": 0.4 },
    { "from": 3, "to": 4, "reactance_x": 0.4 },
    { "from": 1, "to": 2, "reactance_x": 0.5 }
  ],
  "generators": [
    { "bus": 1, "m": 0.03, "d": 0.3, "xd_prime": 0.2, "e_mag": 1.05, "p_m": 0.3 },
    { "bus": 2, "m": 0.02, "d": 0.2, "xd_prime": 0.2, "e_mag": 1.05, "p_m": -0.1 },
    { "bus": 3, "m": 0.02, "d": 0.2, "xd_prime": 0.2, "e_mag": 1.05, "p_m": -0.2 }
  ]
}"#;

#[test]
fn assess_committed_fault_is_stable() {
    let dir = TempDir::new().unwrap();
    let out = run("assess", &model(), Some(&fault()), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("assessment.json"));
    assert_eq!(report["verdict"], "stable");
    let cct = report["estimated_cct"].as_f64().unwrap();
    assert!(cct > 0.2 && cct < 0.2531, "estimated CCT {cct}");
    for f in ["estimate.json", "polytope.json", "trajectory_postfault.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn assess_late_clearing_exits_not_certified() {
    let dir = TempDir::new().unwrap();
    let late = dir.path().join("late.json");
    fs::write(
        &late,
        r#"{"faulted_branch": 2, "fault_location": 0.0, "clearing_time": 10.0, "clearing_action": "trip-branch"}"#,
    )
    .unwrap();
    let out = run("assess", &model(), Some(&late), &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&dir.path().join("out/assessment.json"))["verdict"], "not-certified");
}

#[test]
fn missing_model_is_an_error() {
    let dir = TempDir::new().unwrap();
    let out = run("assess", &dir.path().join("nope.json"), Some(&fault()), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = run("assess", &model(), Some(&fault()), dir.path(), &["--nline", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run("oracle", &model(), Some(&fault()), dir.path(), &["--grid", "7"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_smoke_grid_is_sound_and_fast() {
    let dir = TempDir::new().unwrap();
    let start = Instant::now();
    let out = run("oracle", &model(), Some(&fault()), dir.path(), &["--grid", "11x11"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed < 5.0, "oracle took {elapsed} s");
    let csv = fs::read_to_string(dir.path().join("oracle_grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 121);
    assert!(csv.starts_with("coord1,coord2,class\n"));
    let audit = json(&dir.path().join("audit.json"));
    assert_eq!(audit["soundness_violations"], 0);
    assert_eq!(audit["cells"], 121);
}

#[test]
fn inflated_estimate_is_caught() {
    let dir = TempDir::new().unwrap();
    let out = run(
        "oracle",
        &model(),
        Some(&fault()),
        dir.path(),
        &["--grid", "31x31", "--inflate-v", "10"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(json(&dir.path().join("audit.json"))["soundness_violations"].as_u64().unwrap() > 0);
}

#[test]
fn plotdata_two_machine_bundle() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("fresh/plots");
    let out = run("plotdata", &model(), Some(&fault()), &out_dir, &["--grid", "21x21"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = json(&out_dir.join("bundle.json"));
    assert_eq!(bundle["partial"], false);
    for f in bundle["files"].as_array().unwrap() {
        assert!(out_dir.join(f.as_str().unwrap()).is_file());
    }
    let boundaries = fs::read_to_string(out_dir.join("boundaries.csv")).unwrap();
    for kind in ["true-fb-pi", "true-fb-lvrt", "acfb-lvrt", "acfb-pi"] {
        assert!(boundaries.contains(kind), "{kind} missing");
    }
    let field = fs::read_to_string(out_dir.join("vector_field.csv")).unwrap();
    assert_eq!(field.lines().count(), 1 + 25 * 25);
}

#[test]
fn plotdata_three_machines_is_partial() {
    let dir = TempDir::new().unwrap();
    let m = dir.path().join("m3.json");
    fs::write(&m, THREE_MACHINE).unwrap();
    let f = dir.path().join("f.json");
    fs::write(
        &f,
        r#"{"faulted_branch": 3, "fault_location": 0.0, "clearing_time": 0.05, "clearing_action": "trip-branch"}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run("plotdata", &m, Some(&f), &out_dir, &["--nline", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = json(&out_dir.join("bundle.json"));
    assert_eq!(bundle["n"], 3);
    assert_eq!(bundle["partial"], true);
    assert!(!out_dir.join("vector_field.csv").exists());
    assert!(out_dir.join("trajectory_postfault.csv").is_file());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        assert_eq!(run("assess", &model(), Some(&fault()), d.path(), &[]).status.code(), Some(0));
    }
    for f in ["assessment.json", "estimate.json", "polytope.json", "trajectory_postfault.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn sep_polytope_and_lff_write_reports() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    assert_eq!(run("sep", &model(), None, p, &[]).status.code(), Some(0));
    let sep = json(&p.join("sep.json"));
    assert!((sep["prefault_sep"][0].as_f64().unwrap() - 0.2611450426730431).abs() < 1e-10);
    assert_eq!(run("polytope", &model(), Some(&fault()), p, &["--nline", "3"]).status.code(), Some(0));
    assert_eq!(json(&p.join("polytope.json"))["rows"].as_array().unwrap().len(), 3 + 2);
    assert!(p.join("pwl_fit_0_0.csv").is_file());
    assert_eq!(run("lff", &model(), Some(&fault()), p, &[]).status.code(), Some(0));
    assert!(json(&p.join("lff_report.json"))["lmi"]["max_eig"].as_f64().unwrap() <= 1e-8);
}
