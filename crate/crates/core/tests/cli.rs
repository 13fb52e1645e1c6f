use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_qlcontrol");

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).output().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn smoke() -> String {
    config("linear_1d_smoke.toml").to_string_lossy().into_owned()
}

#[test]
fn smoke_run_succeeds_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = run(&["run", &smoke()], dir.path());
    assert!(start.elapsed() < Duration::from_secs(30));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["exit_code"], 0);
    assert!(r["terminal_error"].as_f64().unwrap() <= 1e-6);
    for f in ["trace.csv", "y_s.csv", "weights.csv", "state.bin", "state.json", "control.bin", "free.bin", "linearization.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn missing_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("linear_1d_smoke.toml")).unwrap();
    let start = text.find("[domain]").unwrap();
    let end = start + text[start..].find("\n[").unwrap() + 1;
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let out = run(&["run", broken.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("domain"));
}

#[test]
fn bad_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("linear_1d_smoke.toml")).unwrap().replace("steps = 80", "steps = 3");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = run(&["run", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("time.steps"));
}

#[test]
fn unknown_subcommand_and_check_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["check", "nonsense", &smoke()], dir.path()).status.code(), Some(2));
}

#[test]
fn seed_controls_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("linear_1d_smoke.toml"))
        .unwrap()
        .replace("kind = \"sine\"", "kind = \"random\"")
        .replace("mode = 1\n", "");
    let path = dir.path().join("random.toml");
    std::fs::write(&path, text).unwrap();
    let path = path.to_str().unwrap();
    let checksum = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = run(&["run", path, "--seed", seed], &out_dir);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        report(&out_dir)["checksum"].as_str().unwrap().to_string()
    };
    let a = checksum("7", "a");
    assert_eq!(a, checksum("7", "b"));
    assert_ne!(a, checksum("8", "c"));
}

#[test]
fn export_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(&["run", &smoke()], dir.path()).status.success());
    let csv = dir.path().join("control.csv");
    let status = Command::new(BIN)
        .arg("export")
        .arg(dir.path().join("control.bin"))
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("t,x,value\n"));
    // 81 layers of 33 nodes
    assert_eq!(text.lines().count(), 1 + 81 * 33);

    let missing = Command::new(BIN).arg("export").arg(dir.path().join("absent.bin")).status().unwrap();
    assert_eq!(missing.code(), Some(2));
}

#[test]
fn checks_pass_on_the_smoke_setting() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["weights", "psi", "duality", "carleman", "observability", "smoothing"] {
        let out = run(&["check", name, &smoke()], dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(format!("check_{name}.json")).exists());
    }
}

#[test]
fn sweep_runs_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["sweep", &smoke(), "--threads", "2", "--set", "initial_data.size=1e-2,5e-3,2.5e-3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["points"].as_array().unwrap().len(), 3);
    for i in 0..3 {
        assert!(dir.path().join(format!("point_{i:03}")).join("report.json").exists());
    }
    let exponent = sweep["control_fit"]["exponent"].as_f64().unwrap();
    assert!((exponent - 1.0).abs() < 0.05, "{exponent}");
}
