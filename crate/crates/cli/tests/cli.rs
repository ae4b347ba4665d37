use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_syncgame"))
        .args(args)
        .current_dir(dir)
        .env_remove("SYNCGAME_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn equilibria_json() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["equilibria", "--beta", "1", "--sigma2", "1", "--kappa", "10", "--json"]));
    assert_eq!(v["kappa_c"].as_f64().unwrap(), 6.0);
    let pts = v["points"].as_array().unwrap();
    assert_eq!(pts.len(), 3);
    let origin = pts.iter().find(|p| p["id"] == "ORIGIN").unwrap();
    assert_eq!(origin["local_type"], "SPIRAL_SOURCE");
}

#[test]
fn phase_diagram_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["phase-diagram", "--beta", "0", "--sigma2", "1", "--kappa", "8", "--grid", "41x41", "-o", "field.csv"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path().join("field.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "a,q,da,dq,E");
    assert_eq!(lines.count(), 1681);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("phase-diagram.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn ne_writes_branch_files() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(dir.path(), &["ne", "--beta", "1", "--sigma2", "1", "--kappa", "10", "--q0", "0.01", "--json"]));
    let n = v["count"].as_u64().unwrap() as usize;
    assert!(n >= 3, "{v}");
    assert!(v["branches"].as_u64().unwrap() >= 2);
    for k in 0..n {
        assert!(dir.path().join(format!("ne_{k}.csv")).exists());
    }
    let first = std::fs::read_to_string(dir.path().join("ne_0.csv")).unwrap();
    assert!(first.starts_with("t,a,q,p,E\n"));
    // beta > 0 leaves E blank
    assert!(first.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["nplayer", "--kappa", "10", "--q0", "0.3", "--n", "100", "--seed", "7"];
    assert!(run(dir.path(), &args).status.success());
    let first = std::fs::read(dir.path().join("nplayer.csv")).unwrap();
    assert!(run(dir.path(), &args).status.success());
    assert_eq!(std::fs::read(dir.path().join("nplayer.csv")).unwrap(), first);
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nplayer.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["n"], 100);
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["equilibria", "--kapa", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--kappa") && err.contains("--sigma2"), "{err}");
}

#[test]
fn solver_failure_is_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["ergodic", "lens", "--beta", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let diag: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(diag["error"], "MODEL_MISMATCH");
}

#[test]
fn config_sits_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# sweep\nbeta = 1\nkappa = 10\nsigma2=1\n").unwrap();
    let v = stdout_json(&run(dir.path(), &["equilibria", "--config", "run.cfg", "--json"]));
    assert_eq!(v["regime"], "SUPERCRITICAL_B");
    let v = stdout_json(&run(dir.path(), &["equilibria", "--config", "run.cfg", "--kappa", "6.1", "--json"]));
    assert_eq!(v["regime"], "SUPERCRITICAL_A");
    std::fs::write(dir.path().join("bad.cfg"), "gamma = 1\n").unwrap();
    assert_eq!(run(dir.path(), &["equilibria", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let o = Command::new(env!("CARGO_BIN_EXE_syncgame"))
        .args(["ergodic", "orbit", "--beta", "0", "--kappa", "8", "--a0", "0.25", "--plots"])
        .current_dir(dir.path())
        .env("SYNCGAME_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["orbit.csv", "orbit.gp", "orbit.json", "ergodic-orbit.manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("orbit.json")).unwrap()).unwrap();
    assert!(summary["period"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(out.join("orbit.csv")).unwrap();
    // beta = 0 fills the energy column
    assert!(!csv.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn nstate_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["nstate", "--states", "3", "--sigma2", "0.2", "--kappa", "0.3", "--horizon", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("nstate.csv")).unwrap();
    assert!(text.starts_with("t,p_1,p_2,p_3,a_1,a_2,a_3\n"));
}
