//! Experiment runner: the configured pipeline, its report and artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{set_path, ExperimentConfig};
use crate::diagnostics::{
    carleman_check, observability_check, power_law_fit, smoothing_scan, sup_envelope_constant, theorem_estimates,
    EstimateReport, PowerLawFit, SmoothingFamily, SmoothingScan,
};
use crate::discretization::io::write_field_csv;
use crate::discretization::{Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::error::{Error, Result};
use crate::fixed_point::{two_phase_run, write_trace_csv, FixedPointProblem, OuterRecord, QiLadder, TwoPhasePlan};
use crate::geometry::{construct_psi, verify_psi, CarlemanParameters, ControlRegion, PsiReport, WeightFields, WeightFunctionPsi};
use crate::nonlinearity::NonlinearityModel;
use crate::solvers::{duality_sides, export_trajectory, solve_quasilinear_controlled, EnergyAudit, StepOperators};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_DIAGNOSTIC: i32 = 4;

/// Exit code for an error raised by the pipeline.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::ConfigInvalid { .. } => EXIT_CONFIG,
        Error::DiagnosticViolation(_) => EXIT_DIAGNOSTIC,
        _ => EXIT_SOLVER,
    }
}

fn status_name(code: i32) -> &'static str {
    match code {
        EXIT_OK => "ok",
        EXIT_CONFIG => "config_error",
        EXIT_DIAGNOSTIC => "diagnostic_violation",
        _ => "solver_failure",
    }
}

/// Everything built from a validated configuration before any time stepping.
pub struct Setup {
    pub grid: Arc<Grid>,
    pub time: TimeGrid,
    pub model: NonlinearityModel,
    pub region: ControlRegion,
    pub psi: WeightFunctionPsi,
    pub params: CarlemanParameters,
    pub y_s: ScalarField,
    pub f: ScalarField,
    pub stationary_residual: f64,
    pub y0: ScalarField,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let grid = config.grid()?;
        let time = config.time_grid()?;
        let model = config.nonlinearity()?;
        let region = ControlRegion::new(&grid, config.region.omega.clone(), config.region.omega0.clone())
            .map_err(|e| Error::config("region", e.to_string()))?;
        let psi = construct_psi(&grid, &region).map_err(|e| Error::config("region", e.to_string()))?;
        let c = &config.carleman;
        let params = CarlemanParameters::new(c.lambda, c.s, time.horizon, psi.sup_norm(), c.proof_regime)
            .map_err(|e| Error::config("carleman", e.to_string()))?;
        let (y_s, f, stationary_residual) = config.stationary_state(&model, &grid)?;
        let dy = config.perturbation(&grid, time)?;
        let y0 = ScalarField::new(grid.clone(), y_s.values().iter().zip(&dy).map(|(a, b)| a + b).collect())?;
        Ok(Setup {
            grid,
            time,
            model,
            region,
            psi,
            params,
            y_s,
            f,
            stationary_residual,
            y0,
        })
    }

    pub fn problem(&self) -> FixedPointProblem {
        FixedPointProblem {
            model: self.model.clone(),
            region: self.region.clone(),
            psi: self.psi.clone(),
            params: self.params,
            y0: self.y0.clone(),
            f: self.f.clone(),
            y_s: self.y_s.clone(),
            time: self.time,
        }
    }

    pub fn weights(&self) -> Result<WeightFields> {
        WeightFields::for_time_grid(&self.psi, &self.params, &self.time)
    }
}

/// Count of nodes breaking `alpha0 <= alpha <= alpha0 (1 - eta)` or `phi0 <= phi <= phi0 / eta`.
pub fn weight_bound_violations(weights: &WeightFields) -> usize {
    let eta = weights.eta();
    let mut bad = 0;
    for j in 0..weights.time_count() {
        let (a0, p0) = (weights.alpha0(j), weights.phi0(j));
        for n in 0..weights.node_count() {
            let (a, p) = (weights.alpha(j, n), weights.phi(j, n));
            if !(a0 <= a && a <= a0 * (1.0 - eta) && p0 <= p && p <= p0 / eta) {
                bad += 1;
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardSummary {
    pub iterations: usize,
    pub converged: bool,
    pub sup_distance: f64,
    pub linearized_terminal_error: f64,
    pub membership_pass: bool,
    pub trace: Vec<OuterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledConstants {
    pub samples: usize,
    pub degenerate: usize,
    pub max_constant: f64,
    /// Only for the observability check: the early-time constant.
    pub max_early_constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub violations: Vec<String>,
    pub config: ExperimentConfig,
    pub stationary_residual: Option<f64>,
    pub data_l2: Option<f64>,
    pub switch_layer: Option<usize>,
    pub switch_time: Option<f64>,
    pub weight_bound_violations: Option<usize>,
    pub picard: Option<PicardSummary>,
    /// `|y(T) - y_s|_2` of the quasilinear equation re-solved with the computed control.
    pub terminal_error: Option<f64>,
    pub terminal_ratio: Option<f64>,
    pub resimulation_gap: Option<f64>,
    pub estimates: Option<EstimateReport>,
    pub carleman: Option<SampledConstants>,
    pub observability: Option<SampledConstants>,
    pub energy: EnergyAudit,
    pub checksum: String,
}

impl RunReport {
    fn empty(config: &ExperimentConfig) -> Self {
        RunReport {
            name: config.name.clone(),
            seed: config.seed,
            status: status_name(EXIT_OK).into(),
            exit_code: EXIT_OK,
            error: None,
            violations: Vec::new(),
            config: config.clone(),
            stationary_residual: None,
            data_l2: None,
            switch_layer: None,
            switch_time: None,
            weight_bound_violations: None,
            picard: None,
            terminal_error: None,
            terminal_ratio: None,
            resimulation_gap: None,
            estimates: None,
            carleman: None,
            observability: None,
            energy: EnergyAudit::clean(),
            checksum: String::new(),
        }
    }

    fn fail(&mut self, code: i32, message: String) {
        if code > self.exit_code {
            self.exit_code = code;
            self.status = status_name(code).into();
        }
        if code == EXIT_DIAGNOSTIC {
            self.violations.push(message);
        } else if self.error.is_none() {
            self.error = Some(message);
        }
    }

    /// SHA-256 of the JSON report with an empty checksum and output directory.
    pub fn compute_checksum(&self) -> String {
        let mut copy = self.clone();
        copy.checksum.clear();
        copy.config.output.dir = PathBuf::new();
        let text = serde_json::to_string(&copy).expect("report serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn seal(mut self) -> Self {
        self.checksum = self.compute_checksum();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("report.json"), text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Result of a finished run, with the in-memory trajectories when they exist.
pub struct RunOutcome {
    pub report: RunReport,
    pub plan: Option<TwoPhasePlan>,
}

fn derivative_field(model: &NonlinearityModel, z: &SpaceTimeField) -> SpaceTimeField {
    let data = z.data().iter().map(|&v| model.da(v)).collect();
    SpaceTimeField::from_flat(z.grid().clone(), z.time(), data).expect("same shape")
}

fn manifest_parameters(config: &ExperimentConfig) -> BTreeMap<String, f64> {
    let mut p = BTreeMap::new();
    p.insert("s".into(), config.carleman.s);
    p.insert("lambda".into(), config.carleman.lambda);
    p.insert("switch_fraction".into(), config.time.switch_fraction);
    p.insert("data_size".into(), config.initial_data.size());
    p.insert("seed".into(), config.seed as f64);
    p
}

fn write_artifacts(config: &ExperimentConfig, setup: &Setup, plan: &TwoPhasePlan, weights: &WeightFields, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut trace = BufWriter::new(File::create(dir.join("trace.csv"))?);
    write_trace_csv(&plan.control_phase.trace, &mut trace)?;
    trace.flush()?;
    let mut ys = BufWriter::new(File::create(dir.join("y_s.csv"))?);
    write_field_csv(&setup.y_s, &mut ys)?;
    ys.flush()?;
    let mut w = BufWriter::new(File::create(dir.join("weights.csv"))?);
    weights.write_csv(&setup.grid, &mut w)?;
    w.flush()?;
    if config.output.trajectories {
        let model = format!("{:?}", config.model.spec);
        let params = manifest_parameters(config);
        export_trajectory(dir, "state", &plan.y, &model, params.clone())?;
        export_trajectory(dir, "control", &plan.u, &model, params.clone())?;
        export_trajectory(dir, "free", &plan.free_phase, &model, params.clone())?;
        export_trajectory(dir, "linearization", &plan.control_phase.z.state, &model, params)?;
    }
    Ok(())
}

/// Runs the full pipeline and writes the report and artifacts into `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> RunOutcome {
    let mut report = RunReport::empty(config);
    let mut plan = None;
    if let Err(e) = pipeline(config, dir, &mut report, &mut plan) {
        report.fail(exit_code(&e), e.to_string());
    }
    let report = report.seal();
    if let Err(e) = report.write(dir) {
        let mut r = report;
        r.fail(EXIT_SOLVER, format!("cannot write report: {e}"));
        return RunOutcome { report: r.seal(), plan };
    }
    RunOutcome { report, plan }
}

fn pipeline(config: &ExperimentConfig, dir: &Path, report: &mut RunReport, out: &mut Option<TwoPhasePlan>) -> Result<()> {
    let setup = Setup::new(config)?;
    report.stationary_residual = Some(setup.stationary_residual);
    let data: Vec<f64> = setup.y0.values().iter().zip(setup.y_s.values()).map(|(a, b)| a - b).collect();
    let data_l2 = crate::discretization::lq_norm_values(&setup.grid, &data, 2.0)?;
    report.data_l2 = Some(data_l2);

    let weights = setup.weights()?;
    let bad = weight_bound_violations(&weights);
    report.weight_bound_violations = Some(bad);
    if bad > 0 {
        report.fail(EXIT_DIAGNOSTIC, format!("{bad} weight nodes violate the alpha/phi bounds"));
    }

    let ladder = QiLadder::new(setup.grid.dims().max(2), config.solver.ladder_q)
        .map_err(|e| Error::config("solver.ladder_q", e.to_string()))?;
    let problem = setup.problem();
    let plan = two_phase_run(&problem, config.time.switch_fraction, &ladder, None, config.solver.picard())?;
    report.switch_layer = Some(plan.switch_layer);
    report.switch_time = Some(plan.switch_time);
    let state = &plan.control_phase;
    report.picard = Some(PicardSummary {
        iterations: state.iteration,
        converged: state.converged,
        sup_distance: state.sup_distance,
        linearized_terminal_error: state.terminal_error,
        membership_pass: state.membership.pass,
        trace: state.trace.clone(),
    });
    if let Some(opt) = &state.optimality {
        report.energy.merge(&opt.energy);
    }

    let resim = solve_quasilinear_controlled(&setup.model, &plan.u, &setup.y0, &setup.f, setup.time, &setup.region)?;
    let gap = resim.state.sup_distance(&plan.y);
    let last: Vec<f64> = resim.state.last().values().iter().zip(setup.y_s.values()).map(|(a, b)| a - b).collect();
    let terminal = crate::discretization::lq_norm_values(&setup.grid, &last, 2.0)?;
    report.resimulation_gap = Some(gap);
    report.terminal_error = Some(terminal);
    report.terminal_ratio = (data_l2 > 0.0).then(|| terminal / data_l2);

    report.estimates = Some(theorem_estimates(&plan.y, &plan.u, &setup.y_s, &weights, &setup.params, config.diagnostics.estimate_q)?);

    let phase_time = state.y.state.time();
    let phase_params = setup.params.with_horizon(phase_time.horizon)?;
    let phase_weights = WeightFields::for_time_grid(&setup.psi, &phase_params, &phase_time)?;
    let b = derivative_field(&setup.model, &state.z.state);
    let d = &config.diagnostics;
    if d.carleman_samples > 0 {
        let c = carleman_check(&b, d.carleman_samples, &phase_params, &phase_weights, &setup.region, config.seed)?;
        report.energy.merge(&c.energy);
        report.carleman = Some(SampledConstants {
            samples: c.reports.len(),
            degenerate: c.reports.iter().filter(|r| r.degenerate).count(),
            max_constant: c.max_c,
            max_early_constant: None,
        });
        if let Some(r) = c.reports.iter().find(|r| r.lhs == 0.0 && r.rhs_control + r.rhs_source != 0.0) {
            report.fail(EXIT_DIAGNOSTIC, format!("sample {} has zero left side but nonzero right side", r.sample));
        }
    }
    if d.observability_samples > 0 {
        let o = observability_check(&b, d.observability_samples, &phase_params, &phase_weights, &setup.region, config.seed)?;
        report.energy.merge(&o.energy);
        report.observability = Some(SampledConstants {
            samples: o.reports.len(),
            degenerate: o.reports.iter().filter(|r| r.degenerate).count(),
            max_constant: o.max_initial_constant,
            max_early_constant: Some(o.max_early_constant),
        });
    }

    write_artifacts(config, &setup, &plan, &weights, dir)?;

    if !state.converged {
        report.fail(
            EXIT_SOLVER,
            Error::NoConvergence {
                iterations: state.iteration,
                distance: state.sup_distance,
            }
            .to_string(),
        );
    }
    if !report.energy.passed() {
        report.fail(
            EXIT_DIAGNOSTIC,
            format!(
                "energy inequality violated at {} layers (worst relative margin {:e} at layer {})",
                report.energy.violations, report.energy.worst_relative_margin, report.energy.worst_layer
            ),
        );
    }
    if d.certify && state.converged && gap > 10.0 * config.solver.tol_sup {
        report.fail(EXIT_DIAGNOSTIC, format!("re-simulated trajectory differs from the fixed point by {gap:e}"));
    }
    *out = Some(plan);
    Ok(())
}

/// Loads a config, applies overrides and runs it into `out` (or the configured directory).
pub fn run_path(path: &Path, overrides: &[(String, toml::Value)], seed: Option<u64>, out: Option<&Path>) -> (i32, Option<RunReport>) {
    match load(path, overrides, seed, out) {
        Ok(config) => {
            let dir = config.output.dir.clone();
            let outcome = run_experiment(&config, &dir);
            (outcome.report.exit_code, Some(outcome.report))
        }
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), None)
        }
    }
}

/// Parses `path` with overrides, seed and output directory applied.
pub fn load(path: &Path, overrides: &[(String, toml::Value)], seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let mut table = ExperimentConfig::parse_table(&text)?;
    for (k, v) in overrides {
        set_path(&mut table, k, v.clone())?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| Error::config("seed", "must not exceed 2^63 - 1"))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(o) = out {
        set_path(&mut table, "output.dir", toml::Value::String(o.display().to_string()))?;
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    ExperimentConfig::from_table(table, name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: BTreeMap<String, toml::Value>,
    pub exit_code: i32,
    pub checksum: String,
    pub data_l2: Option<f64>,
    pub terminal_error: Option<f64>,
    pub estimates: Option<EstimateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub points: Vec<SweepPoint>,
    /// Power laws of each estimate against `|y0 - y_s|_2`, when at least three points allow it.
    pub control_fit: Option<PowerLawFit>,
    pub regularity_fit: Option<PowerLawFit>,
    pub terminal_weighted_fit: Option<PowerLawFit>,
    pub sup_envelope: Option<f64>,
    pub exit_code: i32,
}

/// Runs every point of the product of `axes` (falling back to the config's own axes).
pub fn run_sweep(
    path: &Path,
    axes: BTreeMap<String, Vec<toml::Value>>,
    seed: Option<u64>,
    out: Option<&Path>,
    threads: Option<usize>,
) -> Result<SweepReport> {
    let base = load(path, &[], seed, out)?;
    let axes = if axes.is_empty() { base.sweep.axes.clone() } else { axes };
    if axes.is_empty() {
        return Err(Error::config("sweep", "no sweep axes given"));
    }
    let root = base.output.dir.clone();
    let points = ExperimentConfig::sweep_points(&axes);
    let configs: Vec<ExperimentConfig> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dir = root.join(format!("point_{i:03}"));
            let mut o = p.clone();
            o.push(("output.dir".into(), toml::Value::String(dir.display().to_string())));
            load(path, &o, seed, None)
        })
        .collect::<Result<_>>()?;
    let run_all = || -> Vec<RunReport> { configs.par_iter().map(|c| run_experiment(c, &c.output.dir).report).collect() };
    let reports = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?
            .install(run_all),
        None => run_all(),
    };
    let points: Vec<SweepPoint> = reports
        .into_iter()
        .zip(points)
        .enumerate()
        .map(|(index, (r, p))| SweepPoint {
            index,
            overrides: p.into_iter().collect(),
            exit_code: r.exit_code,
            checksum: r.checksum,
            data_l2: r.data_l2,
            terminal_error: r.terminal_error,
            estimates: r.estimates,
        })
        .collect();
    let est: Vec<EstimateReport> = points.iter().filter(|p| p.exit_code == EXIT_OK).filter_map(|p| p.estimates).collect();
    let fit = |f: fn(&EstimateReport) -> f64| {
        let x: Vec<f64> = est.iter().map(|e| e.data_l2).collect();
        let y: Vec<f64> = est.iter().map(f).collect();
        power_law_fit(&x, &y).ok()
    };
    let report = SweepReport {
        name: base.name.clone(),
        control_fit: fit(|e| e.control_norm),
        regularity_fit: fit(|e| e.regularity_norm),
        terminal_weighted_fit: fit(|e| e.terminal_weighted_norm),
        sup_envelope: (!est.is_empty()).then(|| sup_envelope_constant(&est)),
        exit_code: points.iter().map(|p| p.exit_code).max().unwrap_or(EXIT_OK),
        points,
    };
    std::fs::create_dir_all(&root)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(root.join("sweep.json"), text)?;
    Ok(report)
}

/// Names accepted by [`run_check`].
pub const CHECKS: [&str; 6] = ["weights", "psi", "duality", "carleman", "observability", "smoothing"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub pass: bool,
    pub details: serde_json::Value,
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn random_field(grid: &Arc<Grid>, time: TimeGrid, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> SpaceTimeField {
    let data = (0..grid.node_count() * time.layers()).map(|_| rng.gen_range(lo..hi)).collect();
    SpaceTimeField::from_flat(grid.clone(), time, data).expect("matching length")
}

fn random_interior(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..grid.node_count())
        .map(|n| if grid.is_boundary(n) { 0.0 } else { rng.gen_range(-1.0..1.0) })
        .collect()
}

/// Largest `|lhs - rhs|` of the duality identity over `instances` random coefficient/data draws.
pub fn duality_defect(grid: &Arc<Grid>, time: TimeGrid, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = random_field(grid, time, &mut rng, 0.5, 2.0);
        let u = random_field(grid, time, &mut rng, -1.0, 1.0);
        let g = random_field(grid, time, &mut rng, -1.0, 1.0);
        let f: Vec<f64> = (0..grid.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y0 = random_interior(grid, &mut rng);
        let p_t = random_interior(grid, &mut rng);
        let ops = StepOperators::from_nodal(&b)?;
        let y = ops.forward(&y0, Some(&u), Some(&f))?;
        let (p, _) = ops.adjoint(&p_t, Some(&g))?;
        let (lhs, rhs) = duality_sides(&y, &p, Some(&u), Some(&f), Some(&g));
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Smoothing scan on the configured model and target with a concentrating bump.
pub fn default_smoothing_scan(setup: &Setup, q: f64) -> Result<SmoothingScan> {
    let family = SmoothingFamily::Concentrating {
        height: 0.05,
        center: setup.grid.domain().center()[0],
    };
    smoothing_scan(&setup.model, &setup.y_s, &setup.f, &family, &[0.3, 0.2, 0.14, 0.1, 0.07, 0.05], setup.time, q)
}

/// Runs one named diagnostic on the configured setting and writes `check_<name>.json`.
pub fn run_check(config: &ExperimentConfig, name: &str, dir: &Path) -> Result<CheckReport> {
    let setup = Setup::new(config)?;
    let b1 = SpaceTimeField::constant(&ScalarField::from_fn(setup.grid.clone(), |_| 1.0), setup.time);
    let weights = setup.weights()?;
    let samples = config.diagnostics.carleman_samples.max(1);
    let report = match name {
        "weights" => {
            let bad = weight_bound_violations(&weights);
            CheckReport {
                name: name.into(),
                pass: bad == 0,
                details: serde_json::json!({ "violations": bad, "eta": weights.eta() }),
            }
        }
        "psi" => {
            let r: PsiReport = verify_psi(&setup.psi, &setup.region);
            CheckReport {
                name: name.into(),
                pass: r.pass,
                details: to_json(&r)?,
            }
        }
        "duality" => {
            let defect = duality_defect(&setup.grid, setup.time, 10, config.seed)?;
            CheckReport {
                name: name.into(),
                pass: defect <= 1e-10,
                details: serde_json::json!({ "max_defect": defect }),
            }
        }
        "carleman" => {
            let c = carleman_check(&b1, samples, &setup.params, &weights, &setup.region, config.seed)?;
            let flag_ok = c.reports.iter().all(|r| r.lhs != 0.0 || r.rhs_control + r.rhs_source == 0.0);
            CheckReport {
                name: name.into(),
                pass: c.energy.passed() && flag_ok && c.max_c.is_finite(),
                details: to_json(&c)?,
            }
        }
        "observability" => {
            let o = observability_check(&b1, samples, &setup.params, &weights, &setup.region, config.seed)?;
            CheckReport {
                name: name.into(),
                pass: o.energy.passed() && o.max_initial_constant.is_finite(),
                details: to_json(&o)?,
            }
        }
        "smoothing" => {
            let scan = default_smoothing_scan(&setup, config.solver.ladder_q)?;
            CheckReport {
                name: name.into(),
                pass: scan.fit.exponent.is_finite(),
                details: to_json(&scan)?,
            }
        }
        other => {
            return Err(Error::config(
                "check",
                format!("unknown check `{other}`, expected one of {}", CHECKS.join(", ")),
            ))
        }
    };
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("check_{name}.json")), text)?;
    Ok(report)
}

/// Converts a binary field file to CSV.
pub fn export_csv(input: &Path, output: &Path) -> Result<()> {
    let mut reader = std::io::BufReader::new(File::open(input)?);
    let field = crate::discretization::io::read_binary(&mut reader)?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(output)?);
    field.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}
