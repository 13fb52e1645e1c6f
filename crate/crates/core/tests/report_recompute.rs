//! Recomputes report values from the exported CSV artifacts with a
//! hand-written trapezoidal quadrature.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_qlcontrol");

fn config(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Spatial profiles keyed by the time bits, each as `(x, value)` pairs.
fn layers(path: &Path) -> BTreeMap<u64, Vec<(f64, f64)>> {
    let mut out: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows(path) {
        out.entry(r[0].to_bits()).or_default().push((r[1], r[2]));
    }
    out
}

fn trapezoid_l2(xs: &[f64], vs: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 1..xs.len() {
        sum += 0.5 * (xs[i] - xs[i - 1]) * (vs[i] * vs[i] + vs[i - 1] * vs[i - 1]);
    }
    sum.sqrt()
}

fn export(dir: &Path, name: &str) -> std::path::PathBuf {
    let csv = dir.join(format!("{name}.csv"));
    let status = Command::new(BIN).arg("export").arg(dir.join(format!("{name}.bin"))).arg(&csv).status().unwrap();
    assert!(status.success());
    csv
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-300)
}

#[test]
fn report_values_match_exported_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(BIN)
        .args(["run", config("cubic_1d_two_phase.toml").to_str().unwrap(), "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let num = |ptr: &str| report.pointer(ptr).and_then(Value::as_f64).unwrap_or_else(|| panic!("missing {ptr}"));

    let ys: Vec<f64> = rows(&dir.path().join("y_s.csv")).iter().map(|r| r[1]).collect();
    let state = layers(&export(dir.path(), "state"));
    let control = layers(&export(dir.path(), "control"));
    let xs: Vec<f64> = state.values().next().unwrap().iter().map(|p| p.0).collect();
    let deviation = |layer: &[(f64, f64)]| -> Vec<f64> { layer.iter().zip(&ys).map(|(p, s)| p.1 - s).collect() };

    let first = state.values().next().unwrap();
    let last = state.values().last().unwrap();
    let data = trapezoid_l2(&xs, &deviation(first));
    assert!(close(data, num("/data_l2"), 1e-8), "{data} vs {}", num("/data_l2"));

    let terminal = trapezoid_l2(&xs, &deviation(last));
    assert!(close(terminal, num("/picard/linearized_terminal_error"), 1e-8));
    // the re-solved state differs by at most the sup gap, and the domain has unit length
    assert!((terminal - num("/terminal_error")).abs() <= num("/resimulation_gap") + 1e-15);

    let sup = state.values().flat_map(|l| deviation(l)).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(close(sup, num("/estimates/sup_deviation"), 1e-8));

    // weighted control norm, cells sampled at their right layer with the midpoint weight
    let weights = rows(&dir.path().join("weights.csv"));
    let horizon = num("/config/time/horizon");
    let s = num("/config/carleman/s");
    let mut alpha0: BTreeMap<u64, f64> = BTreeMap::new();
    for r in &weights {
        assert!(close(r[5], 1.0 / (r[0] * (horizon - r[0])), 1e-12));
        alpha0.insert(r[0].to_bits(), r[4]);
    }
    let layer_maxima: Vec<f64> = control.values().map(|l| l.iter().fold(0.0f64, |m, p| m.max(p.1.abs()))).collect();
    let factors: Vec<f64> = alpha0.values().map(|a| (-s * a).exp()).collect();
    assert_eq!(factors.len() + 1, layer_maxima.len());
    let control_norm = factors.iter().zip(&layer_maxima[1..]).map(|(w, m)| w * m).fold(0.0, f64::max);
    assert!(close(control_norm, num("/estimates/control_norm"), 1e-8));
}
