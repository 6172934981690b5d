use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn brokenray(config: Option<&Path>, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_brokenray"));
    for var in ["BRT_CONFIG", "BRT_SEED", "BRT_THREADS", "BRT_OUT"] {
        cmd.env_remove(var);
    }
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn summary_value(out: &Output, key: &str) -> Option<String> {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

#[test]
fn forward_single_ray_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = brokenray(Some(&fixture("square45.toml")), dir.path(), &["forward", "--start", "0,0.25", "--dir", "1,1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: f64 = summary_value(&out, "value").unwrap().parse().unwrap();
    assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-6, "value {v}");
    assert_eq!(summary_value(&out, "ray_status").as_deref(), Some("ENDED_IN_E"));
    assert!(dir.path().join("sinogram.brs").is_file());
}

#[test]
fn trace_reports_segments() {
    let dir = tempfile::tempdir().unwrap();
    let out = brokenray(Some(&fixture("square45.toml")), dir.path(), &["trace", "--start", "0,0.25", "--dir", "1,1"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary_value(&out, "segments").as_deref(), Some("4"));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn adjoint_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = brokenray(Some(&fixture("small.toml")), dir.path(), &["adjoint-check", "--pairs", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let d: f64 = summary_value(&out, "rel_discrepancy").unwrap().parse().unwrap();
    assert!(d < 1e-10);
}

#[test]
fn invariants_subset() {
    let dir = tempfile::tempdir().unwrap();
    let out = brokenray(None, dir.path(), &["invariants", "--only", "1,adjoint_exactness"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary_value(&out, "check.unfolding_collinearity").as_deref(), Some("pass"));
    assert_eq!(summary_value(&out, "check.adjoint_exactness").as_deref(), Some("pass"));
}

#[test]
fn unknown_check_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = brokenray(None, dir.path(), &["invariants", "--only", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_with_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "domain = { kind = \"cube_slab\", eps = 2.0 }\n").unwrap();
    let out = brokenray(Some(&cfg), dir.path(), &["adjoint-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[domain]"));

    std::fs::write(&cfg, "phantom_file = \"missing.toml\"\n").unwrap();
    let out = brokenray(Some(&cfg), dir.path(), &["forward"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_landweber_step_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("step.toml");
    let text = std::fs::read_to_string(fixture("small.toml")).unwrap();
    let text = text.replace("max_iters = 60", "max_iters = 60\nmethod = \"landweber\"\nstep = 100.0");
    std::fs::write(&cfg, text).unwrap();
    let out = brokenray(Some(&cfg), dir.path(), &["reconstruct"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[solver]"));
}

#[test]
fn reconstruct_round_trips_saved_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("small.toml");
    let out = brokenray(Some(&cfg), dir.path(), &["forward", "--csv"]);
    assert_eq!(out.status.code(), Some(0));
    let data = dir.path().join("sinogram.csv");
    let out = brokenray(Some(&cfg), dir.path(), &["reconstruct", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("reconstruction.brf").is_file());
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_brokenray"))
        .env("BRT_SEED", "17")
        .env("BRT_OUT", dir.path())
        .env_remove("BRT_CONFIG")
        .args(["invariants", "--only", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary_value(&out, "seed").as_deref(), Some("17"));
}
