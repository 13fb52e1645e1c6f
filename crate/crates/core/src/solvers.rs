//! Implicit Euler solvers for the quasilinear state equation, its frozen
//! coefficient linearization and the backward adjoint.
//!
//! Step `k -> k+1` of the linear schemes uses the coefficient of layer `k+1`:
//!
//! ```text
//! forward:  (I - dt L_{k+1}) y^{k+1} = y^k + dt (m u^{k+1} + f)
//! adjoint:  (I - dt L_{k+1}) p^k     = p^{k+1} - dt g^{k+1}
//! ```
//!
//! so that `<y^K, p^K> - <y^0, p^0> = sum_k dt (<m u^{k+1} + f, p^k> + <g^{k+1}, y^{k+1}>)`
//! holds exactly up to rounding.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretization::io::write_spacetime_binary;
use crate::discretization::{
    assemble_faces, FaceCoefficients, Grid, ScalarField, ShiftedSolver, SpaceTimeField, SparseOperator, TimeGrid,
};
use crate::error::{Error, Result};
use crate::geometry::ControlRegion;
use crate::nonlinearity::{unit_laplacian, NonlinearityModel};

/// Newton iterations stop once the step residual is below this (sup norm).
pub const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 30;

/// A computed state trajectory with per-step Newton statistics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: SpaceTimeField,
    pub newton_iterations: Vec<usize>,
    pub residuals: Vec<f64>,
}

impl Trajectory {
    fn linear(state: SpaceTimeField) -> Self {
        let steps = state.time().steps;
        Trajectory {
            state,
            newton_iterations: vec![0; steps],
            residuals: vec![0.0; steps],
        }
    }
}

/// Worst layer of the discrete energy inequality
/// `|p^k|^2 + mu dt |grad p^k|^2 <= |p^{k+1}|^2 + 2 dt sum |g^{k+1} p^k|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// `max_k (lhs - rhs) / max(lhs, rhs)`; nonpositive when the inequality holds.
    pub worst_relative_margin: f64,
    pub worst_layer: usize,
    pub violations: usize,
}

impl EnergyAudit {
    const SLACK: f64 = 1e-11;

    pub fn clean() -> Self {
        EnergyAudit {
            worst_relative_margin: f64::NEG_INFINITY,
            worst_layer: 0,
            violations: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn merge(&mut self, other: &EnergyAudit) {
        if other.worst_relative_margin > self.worst_relative_margin {
            self.worst_relative_margin = other.worst_relative_margin;
            self.worst_layer = other.worst_layer;
        }
        self.violations += other.violations;
    }
}

/// Adjoint trajectory together with its terminal data and energy audit.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub p: SpaceTimeField,
    pub terminal: ScalarField,
    pub energy: EnergyAudit,
}

/// Per-step face coefficients and the factorized implicit-Euler matrices.
#[derive(Debug, Clone)]
pub struct StepOperators {
    grid: Arc<Grid>,
    time: TimeGrid,
    faces: Vec<FaceCoefficients>,
    ops: Vec<SparseOperator>,
    solvers: Vec<ShiftedSolver>,
}

impl StepOperators {
    /// `faces[k]` is the coefficient used on step `k -> k+1`.
    pub fn new(grid: Arc<Grid>, time: TimeGrid, faces: Vec<FaceCoefficients>) -> Result<Self> {
        if faces.len() != time.steps {
            return Err(Error::invalid("one face table per time step is required"));
        }
        let dt = time.dt();
        let mut ops = Vec::with_capacity(faces.len());
        let mut solvers = Vec::new();
        for fc in &faces {
            let min = fc.min(&grid);
            if !(min > 0.0) {
                return Err(Error::NonpositiveCoefficient { min });
            }
            let op = assemble_faces(&grid, fc);
            if grid.dims() == 1 {
                solvers.push(ShiftedSolver::new(&op, &vec![1.0; op.size()], dt));
            }
            ops.push(op);
        }
        Ok(StepOperators {
            grid,
            time,
            faces,
            ops,
            solvers,
        })
    }

    pub fn uniform(grid: Arc<Grid>, time: TimeGrid, b: f64) -> Result<Self> {
        let faces = vec![FaceCoefficients::uniform(&grid, b); time.steps];
        Self::new(grid, time, faces)
    }

    /// Harmonic-mean faces of a nodal coefficient, layer `k+1` for step `k`.
    pub fn from_nodal(b: &SpaceTimeField) -> Result<Self> {
        let grid = b.grid().clone();
        let time = b.time();
        let mut faces = Vec::with_capacity(time.steps);
        for k in 0..time.steps {
            let layer = b.layer(k + 1);
            let min = layer.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(min > 0.0) {
                return Err(Error::NonpositiveCoefficient { min });
            }
            faces.push(FaceCoefficients::harmonic(&grid, layer));
        }
        Self::new(grid, time, faces)
    }

    /// Secant faces `(a(z_j) - a(z_i)) / (z_j - z_i)` of the linearization point.
    ///
    /// With this choice `div(b grad z) = Delta_h a(z)` holds exactly on every
    /// layer, so a fixed point of the linearized map solves the discrete
    /// quasilinear scheme.
    pub fn from_state(model: &NonlinearityModel, z: &SpaceTimeField) -> Result<Self> {
        let grid = z.grid().clone();
        let time = z.time();
        let faces = (0..time.steps)
            .map(|k| FaceCoefficients::from_nodal(&grid, z.layer(k + 1), |u, v| model.secant(u, v)))
            .collect();
        Self::new(grid, time, faces)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    /// Face coefficients of step `k -> k+1`.
    pub fn faces(&self, k: usize) -> &FaceCoefficients {
        &self.faces[k]
    }

    fn solver(&self, k: usize) -> Cow<'_, ShiftedSolver> {
        match self.solvers.get(k) {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(ShiftedSolver::new(&self.ops[k], &vec![1.0; self.ops[k].size()], self.time.dt())),
        }
    }

    /// Forward sweep. `source` is the already-masked `m u` (layer `k+1` used
    /// on step `k`); `f` is a stationary forcing.
    pub fn forward(&self, y0: &[f64], source: Option<&SpaceTimeField>, f: Option<&[f64]>) -> Result<SpaceTimeField> {
        let grid = &self.grid;
        let dt = self.time.dt();
        let mut out = SpaceTimeField::zeros(grid.clone(), self.time);
        let mut cur = grid.gather_interior(y0);
        grid.scatter_interior(&cur, out.layer_mut(0));
        let fi = f.map(|f| grid.gather_interior(f));
        let mut rhs = vec![0.0; cur.len()];
        for k in 0..self.time.steps {
            rhs.copy_from_slice(&cur);
            if let Some(src) = source {
                let layer = src.layer(k + 1);
                for (slot, &n) in grid.interior_nodes().iter().enumerate() {
                    rhs[slot] += dt * layer[n];
                }
            }
            if let Some(fi) = &fi {
                for (r, v) in rhs.iter_mut().zip(fi) {
                    *r += dt * v;
                }
            }
            self.solver(k).solve(&rhs, &mut cur)?;
            grid.scatter_interior(&cur, out.layer_mut(k + 1));
        }
        Ok(out)
    }

    /// Backward sweep from `p_t` with source `g` (layer `k+1` used on step `k`).
    pub fn adjoint(&self, p_t: &[f64], g: Option<&SpaceTimeField>) -> Result<(SpaceTimeField, EnergyAudit)> {
        let grid = &self.grid;
        let dt = self.time.dt();
        let vol = grid.cell_volume();
        let steps = self.time.steps;
        let mut out = SpaceTimeField::zeros(grid.clone(), self.time);
        let mut next = grid.gather_interior(p_t);
        grid.scatter_interior(&next, out.layer_mut(steps));
        let mut cur = next.clone();
        let mut rhs = vec![0.0; next.len()];
        let mut audit = EnergyAudit::clean();
        for k in (0..steps).rev() {
            rhs.copy_from_slice(&next);
            let gl = g.map(|g| grid.gather_interior(g.layer(k + 1)));
            if let Some(gl) = &gl {
                for (r, v) in rhs.iter_mut().zip(gl) {
                    *r -= dt * v;
                }
            }
            self.solver(k).solve(&rhs, &mut cur)?;
            grid.scatter_interior(&cur, out.layer_mut(k));

            let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() * vol;
            let grad2 = gradient_energy(grid, out.layer(k));
            let mu = self.faces[k].min(grid);
            let lhs = norm2(&cur) + mu * dt * grad2;
            let src: f64 = gl
                .as_ref()
                .map(|gl| gl.iter().zip(&cur).map(|(a, b)| (a * b).abs()).sum::<f64>() * vol)
                .unwrap_or(0.0);
            let rhs_e = norm2(&next) + 2.0 * dt * src;
            let scale = lhs.max(rhs_e);
            if scale > 0.0 {
                let margin = (lhs - rhs_e) / scale;
                if margin > audit.worst_relative_margin {
                    audit.worst_relative_margin = margin;
                    audit.worst_layer = k;
                }
                if margin > EnergyAudit::SLACK {
                    audit.violations += 1;
                }
            }
            next.copy_from_slice(&cur);
        }
        Ok((out, audit))
    }
}

/// `sum_faces ((v_j - v_i)/h)^2 h^n`.
fn gradient_energy(grid: &Grid, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for axis in 0..grid.dims() {
        let h = grid.spacing(axis);
        for n in 0..grid.node_count() {
            if let Some(m) = grid.neighbor(n, axis, true) {
                let d = (v[m] - v[n]) / h;
                acc += d * d;
            }
        }
    }
    acc * grid.cell_volume()
}

/// Applies the 0/1 control mask to every layer.
pub fn mask_control(u: &SpaceTimeField, region: &ControlRegion) -> SpaceTimeField {
    let mask = region.indicator();
    let n = mask.len();
    let data = u.data().iter().enumerate().map(|(i, v)| v * mask[i % n]).collect();
    SpaceTimeField::from_flat(u.grid().clone(), u.time(), data).expect("same shape")
}

fn check_boundary(y0: &ScalarField) -> Result<()> {
    if !y0.vanishes_on_boundary(1e-12 * (1.0 + y0.max_abs())) {
        return Err(Error::invalid("initial data must vanish on the boundary"));
    }
    Ok(())
}

pub fn solve_uncontrolled(model: &NonlinearityModel, y0: &ScalarField, f: &ScalarField, tg: TimeGrid) -> Result<Trajectory> {
    quasilinear_sweep(model, y0, f, None, tg)
}

/// Quasilinear equation with source `m u`.
pub fn solve_quasilinear_controlled(
    model: &NonlinearityModel,
    u: &SpaceTimeField,
    y0: &ScalarField,
    f: &ScalarField,
    tg: TimeGrid,
    region: &ControlRegion,
) -> Result<Trajectory> {
    let mu = mask_control(u, region);
    quasilinear_sweep(model, y0, f, Some(&mu), tg)
}

fn quasilinear_sweep(
    model: &NonlinearityModel,
    y0: &ScalarField,
    f: &ScalarField,
    source: Option<&SpaceTimeField>,
    tg: TimeGrid,
) -> Result<Trajectory> {
    check_boundary(y0)?;
    let grid = y0.grid().clone();
    let lap = unit_laplacian(&grid);
    let dt = tg.dt();
    let fi = grid.gather_interior(f.values());
    let mut out = SpaceTimeField::zeros(grid.clone(), tg);
    let mut prev = grid.gather_interior(y0.values());
    grid.scatter_interior(&prev, out.layer_mut(0));
    let mut iterations = Vec::with_capacity(tg.steps);
    let mut residuals = Vec::with_capacity(tg.steps);
    let mut forcing = vec![0.0; prev.len()];
    for k in 0..tg.steps {
        for (slot, v) in forcing.iter_mut().enumerate() {
            *v = fi[slot];
        }
        if let Some(src) = source {
            let layer = src.layer(k + 1);
            for (slot, &n) in grid.interior_nodes().iter().enumerate() {
                forcing[slot] += layer[n];
            }
        }
        let step = NewtonStep {
            model,
            lap: &lap,
            prev: &prev,
            forcing: &forcing,
            dt,
        };
        let (next, iters, res) = step.solve().map_err(|e| match e {
            Error::NewtonDiverged { residual, .. } => Error::NewtonDiverged { layer: k + 1, residual },
            other => other,
        })?;
        grid.scatter_interior(&next, out.layer_mut(k + 1));
        prev = next;
        iterations.push(iters);
        residuals.push(res);
    }
    Ok(Trajectory {
        state: out,
        newton_iterations: iterations,
        residuals,
    })
}

/// One implicit step `y - dt Delta_h a(y) = prev + dt forcing` on interior nodes.
struct NewtonStep<'a> {
    model: &'a NonlinearityModel,
    lap: &'a SparseOperator,
    prev: &'a [f64],
    forcing: &'a [f64],
    dt: f64,
}

impl NewtonStep<'_> {
    fn residual(&self, y: &[f64], out: &mut [f64], work: &mut [f64]) -> f64 {
        let ay: Vec<f64> = y.iter().map(|&v| self.model.a(v)).collect();
        self.lap.apply(&ay, work);
        let mut worst: f64 = 0.0;
        for i in 0..y.len() {
            out[i] = y[i] - self.prev[i] - self.dt * (work[i] + self.forcing[i]);
            worst = worst.max(out[i].abs());
        }
        worst
    }

    fn solve(&self) -> Result<(Vec<f64>, usize, f64)> {
        let n = self.prev.len();
        let mut y = self.prev.to_vec();
        let mut r = vec![0.0; n];
        let mut work = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut rt = vec![0.0; n];
        let mut res = self.residual(&y, &mut r, &mut work);
        let mut iters = 0;
        let mut polished = false;
        loop {
            let converged = res <= NEWTON_TOL;
            if converged && (polished || res == 0.0) {
                return Ok((y, iters, res));
            }
            if iters >= NEWTON_MAX_ITER {
                return Err(Error::NewtonDiverged { layer: 0, residual: res });
            }
            iters += 1;
            // J = I - dt Delta_h D with D = diag(a'(y)); solve (D^{-1} - dt Delta_h) w = -R, delta = w / D
            let d: Vec<f64> = y.iter().map(|&v| self.model.da(v)).collect();
            let shift: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
            let solver = ShiftedSolver::new(self.lap, &shift, self.dt);
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let mut w = vec![0.0; n];
            solver.solve(&neg, &mut w)?;
            let delta: Vec<f64> = w.iter().zip(&d).map(|(w, d)| w / d).collect();
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for i in 0..n {
                    trial[i] = y[i] + step * delta[i];
                }
                let trial_res = self.residual(&trial, &mut rt, &mut work);
                if trial_res < res || (converged && trial_res <= res) {
                    std::mem::swap(&mut y, &mut trial);
                    std::mem::swap(&mut r, &mut rt);
                    res = trial_res;
                    accepted = true;
                    break;
                }
                if converged {
                    break;
                }
                step *= 0.5;
            }
            if converged {
                polished = true;
                continue;
            }
            if !accepted {
                return Err(Error::NewtonDiverged { layer: 0, residual: res });
            }
        }
    }
}

/// Frozen-coefficient linear equation around the trajectory `z`.
pub fn solve_linearized(
    model: &NonlinearityModel,
    z: &Trajectory,
    u: &SpaceTimeField,
    y0: &ScalarField,
    f: &ScalarField,
    tg: TimeGrid,
    region: &ControlRegion,
) -> Result<Trajectory> {
    check_boundary(y0)?;
    if z.state.time() != tg || u.time() != tg {
        return Err(Error::invalid("trajectories must share the time grid"));
    }
    let ops = StepOperators::from_state(model, &z.state)?;
    let mu = mask_control(u, region);
    Ok(Trajectory::linear(ops.forward(y0.values(), Some(&mu), Some(f.values()))?))
}

/// Backward adjoint with nodal coefficient `b` (harmonic-mean faces).
pub fn solve_adjoint(b: &SpaceTimeField, g: &SpaceTimeField, p_t: &ScalarField, tg: TimeGrid) -> Result<AdjointTrajectory> {
    if b.time() != tg || g.time() != tg {
        return Err(Error::invalid("trajectories must share the time grid"));
    }
    let ops = StepOperators::from_nodal(b)?;
    solve_adjoint_with(&ops, Some(g), p_t)
}

pub fn solve_adjoint_with(ops: &StepOperators, g: Option<&SpaceTimeField>, p_t: &ScalarField) -> Result<AdjointTrajectory> {
    let (p, energy) = ops.adjoint(p_t.values(), g)?;
    let mut terminal = p_t.clone();
    for &b in ops.grid().boundary_nodes() {
        terminal.values_mut()[b] = 0.0;
    }
    Ok(AdjointTrajectory { p, terminal, energy })
}

/// The two sides of the discrete duality identity.
pub fn duality_sides(
    y: &SpaceTimeField,
    p: &SpaceTimeField,
    source: Option<&SpaceTimeField>,
    f: Option<&[f64]>,
    g: Option<&SpaceTimeField>,
) -> (f64, f64) {
    let grid = y.grid();
    let tg = y.time();
    let dt = tg.dt();
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        grid.interior_nodes().iter().map(|&n| a[n] * b[n]).sum::<f64>() * grid.cell_volume()
    };
    let lhs = inner(y.layer(tg.steps), p.layer(tg.steps)) - inner(y.layer(0), p.layer(0));
    let mut rhs = 0.0;
    for k in 0..tg.steps {
        if let Some(s) = source {
            rhs += dt * inner(s.layer(k + 1), p.layer(k));
        }
        if let Some(f) = f {
            rhs += dt * inner(f, p.layer(k));
        }
        if let Some(g) = g {
            rhs += dt * inner(g.layer(k + 1), y.layer(k + 1));
        }
    }
    (lhs, rhs)
}

/// Human-readable description written next to a binary trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub name: String,
    pub bounds: Vec<(f64, f64)>,
    pub nodes: Vec<usize>,
    pub horizon: f64,
    pub steps: usize,
    pub model: String,
    pub parameters: std::collections::BTreeMap<String, f64>,
}

/// Writes `<name>.bin` and `<name>.json` into `dir`.
pub fn export_trajectory(
    dir: &Path,
    name: &str,
    field: &SpaceTimeField,
    model: &str,
    parameters: std::collections::BTreeMap<String, f64>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.bin")))?);
    write_spacetime_binary(field, &mut bin)?;
    bin.flush()?;
    let grid = field.grid();
    let manifest = TrajectoryManifest {
        name: name.to_string(),
        bounds: grid.domain().bounds().to_vec(),
        nodes: grid.counts().to_vec(),
        horizon: field.time().horizon,
        steps: field.time().steps,
        model: model.to_string(),
        parameters,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("{name}.json")), text)?;
    Ok(())
}
