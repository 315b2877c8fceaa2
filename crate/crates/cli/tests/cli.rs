use std::path::Path;
use std::process::{Command, Output};

fn rwre(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwre")).current_dir(dir).args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn calibrate_reference_family() {
    let d = tempfile::tempdir().unwrap();
    let out = rwre(d.path(), &["calibrate", "--family", "gaussian-binary"]);
    assert!(out.status.success());
    let v = json(&out);
    let ln4 = 2.0 * std::f64::consts::LN_2;
    for k in ["mu", "s2", "sigma2"] {
        assert!((v["law"][k].as_f64().unwrap() - ln4).abs() < 1e-10, "{k}");
    }
    assert!(v["meta"]["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn walk_output_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let args = ["walk", "--mode", "excursions", "--n", "1000", "--replicas", "100", "--seed", "7"];
    let a = rwre(d.path(), &args);
    let b = rwre(d.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 101);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["meta"]["seed"], 7);
    let c = rwre(d.path(), &["walk", "--mode", "excursions", "--n", "1000", "--replicas", "100", "--seed", "8"]);
    assert_ne!(text.as_bytes(), &c.stdout[..]);
}

#[test]
fn constants_quick_populates_estimates() {
    let d = tempfile::tempdir().unwrap();
    let out = rwre(d.path(), &["constants", "--quick", "--out", "c"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let h = json(&out);
    assert!(h["Lambda"]["value"].as_f64().unwrap() > 0.0);
    for k in ["c0", "c1_plus", "c2_plus", "sum_eg", "h_infinity_mean", "Lambda"] {
        assert!(h[k]["se"].as_f64().unwrap() > 0.0, "{k}");
    }
    let csv = std::fs::read_to_string(d.path().join("c/lambda.csv")).unwrap();
    assert!(csv.starts_with("# rwre "));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("c/constants.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], h_hash(&d.path().join("c/constants.json")));
}

fn h_hash(p: &Path) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    v["meta"]["config_hash"].clone()
}

#[test]
fn config_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "[walk]\nreplicas = -3\n").unwrap();
    let out = rwre(d.path(), &["--config", "bad.toml", "walk"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("walk.replicas"));
    let out = rwre(d.path(), &["experiment", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn step_budget_exits_three() {
    let d = tempfile::tempdir().unwrap();
    let out = rwre(d.path(), &["walk", "--n", "100000", "--replicas", "2", "--set", "walk.max_steps=100"]);
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("step budget"));
}

#[test]
fn experiment_and_report_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let cfg = "seed = 4\n[experiments]\npredictions = \"none\"\n[experiments.range]\nn_grid = [1000, 4000]\nreplicas = 4\n";
    std::fs::write(d.path().join("r.toml"), cfg).unwrap();
    for dir in ["a", "b"] {
        let out = rwre(d.path(), &["--config", "r.toml", "experiment", "range", "--out", dir]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["range.csv", "range_windows.csv", "range.manifest.json"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let out = rwre(d.path(), &["report", "--dir", "a"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("range.manifest.json"));
}
