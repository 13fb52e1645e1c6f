//! Weighted tracking control problem: discrete functional, adjoint gradient,
//! preconditioned conjugate gradients, penalized terminal variant and audits.
//!
//! Controls live on the nodes of `omega`; layer `k+1` of `u` acts on step
//! `k -> k+1`, and layer 0 is always zero. The discrete functional is
//!
//! ```text
//! Q(u) = sum_j dt [ <c_j u^{j+1}, u^{j+1}>_omega + <w_j (y^{j+1} - r^{j+1}), y^{j+1} - r^{j+1}> ]
//!        + kappa |y^K - y_s|^2
//! ```
//!
//! with `c = e^{-2 s alpha} phi^{-3}`, `w = e^{-2 s alpha}` at cell midpoints,
//! `r = Y` up to `T/2` and `r = y_s` afterwards.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretization::{face_gradient_pairing, FaceCoefficients, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::error::{Error, Result};
use crate::geometry::{CarlemanParameters, ControlRegion, WeightFields};
use crate::nonlinearity::NonlinearityModel;
use crate::solvers::{AdjointTrajectory, EnergyAudit, StepOperators, Trajectory};

pub const CG_TOL: f64 = 1e-9;
pub const CG_MAX_ITER: usize = 2000;

/// `Y` on `[0, T/2]`, `y_s` on `(T/2, T]`.
#[derive(Debug, Clone)]
pub struct TrackingTarget {
    pub first_half: SpaceTimeField,
    pub second_half: ScalarField,
    switch_layer: usize,
}

impl TrackingTarget {
    pub fn new(first_half: SpaceTimeField, second_half: ScalarField) -> Result<Self> {
        let steps = first_half.time().steps;
        if steps % 2 != 0 {
            return Err(Error::invalid("the number of time steps must be even so that T/2 is a layer"));
        }
        Ok(TrackingTarget {
            first_half,
            second_half,
            switch_layer: steps / 2,
        })
    }

    pub fn switch_layer(&self) -> usize {
        self.switch_layer
    }

    pub fn switch_time(&self) -> f64 {
        self.first_half.time().time(self.switch_layer)
    }

    /// Target values at layer `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        if k <= self.switch_layer {
            self.first_half.layer(k)
        } else {
            self.second_half.values()
        }
    }
}

/// Which terms the functional contains.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Objective {
    tracking: bool,
    terminal_weight: f64,
}

/// The linear-quadratic problem around a fixed linearization point `z`.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    grid: Arc<Grid>,
    time: TimeGrid,
    region: ControlRegion,
    params: CarlemanParameters,
    weights: WeightFields,
    target: TrackingTarget,
    y0: ScalarField,
    f: ScalarField,
    ops: StepOperators,
    objective: Objective,
    nodes: Vec<usize>,
    /// `e^{-2 s alpha} phi^{-3}` per (cell, control node).
    control_weight: Vec<f64>,
    /// `e^{-2 s alpha}` per (cell, node).
    tracking_weight: Vec<f64>,
    saturated: Vec<bool>,
    volume: f64,
    cg_tol: f64,
    cg_max_iter: usize,
}

/// Unknowns packed as `cell * nodes.len() + i`.
type Packed = Vec<f64>;

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &NonlinearityModel,
        region: ControlRegion,
        weights: WeightFields,
        params: CarlemanParameters,
        target: TrackingTarget,
        z: &SpaceTimeField,
        y0: ScalarField,
        f: ScalarField,
    ) -> Result<Self> {
        let ops = StepOperators::from_state(model, z)?;
        Self::with_operators(ops, region, weights, params, target, y0, f)
    }

    /// As [`ControlProblem::new`] with precomputed step operators.
    pub fn with_operators(
        ops: StepOperators,
        region: ControlRegion,
        weights: WeightFields,
        params: CarlemanParameters,
        target: TrackingTarget,
        y0: ScalarField,
        f: ScalarField,
    ) -> Result<Self> {
        let grid = ops.grid().clone();
        let time = ops.time();
        if !(params.s > 0.0 && params.lambda > 0.0) {
            return Err(Error::invalid("the control problem needs s > 0 and lambda > 0"));
        }
        if weights.time_count() != time.steps || weights.node_count() != grid.node_count() {
            return Err(Error::invalid("weight table does not match the grids"));
        }
        if target.first_half.time() != time {
            return Err(Error::invalid("target trajectory does not match the time grid"));
        }
        if (params.horizon - time.horizon).abs() > 1e-12 * time.horizon {
            return Err(Error::invalid("Carleman horizon differs from the time grid"));
        }
        let nodes: Vec<usize> = region
            .control_nodes()
            .into_iter()
            .filter(|&n| !grid.is_boundary(n))
            .collect();
        let s = params.s;
        let mut control_weight = Vec::with_capacity(time.steps * nodes.len());
        let mut tracking_weight = Vec::with_capacity(time.steps * grid.node_count());
        let mut saturated = Vec::with_capacity(time.steps * grid.node_count());
        for j in 0..time.steps {
            for &n in &nodes {
                control_weight.push(weights.exp_weight(-2.0 * s, j, n) * weights.phi(j, n).powi(-3));
            }
            for n in 0..grid.node_count() {
                tracking_weight.push(weights.exp_weight(-2.0 * s, j, n));
                saturated.push(weights.saturates(-2.0 * s, j, n));
            }
        }
        if control_weight.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::invalid("control cost weight is not finite and positive"));
        }
        let volume = grid.cell_volume();
        Ok(ControlProblem {
            grid,
            time,
            region,
            params,
            weights,
            target,
            y0,
            f,
            ops,
            objective: Objective {
                tracking: true,
                terminal_weight: 0.0,
            },
            nodes,
            control_weight,
            tracking_weight,
            saturated,
            volume,
            cg_tol: CG_TOL,
            cg_max_iter: CG_MAX_ITER,
        })
    }

    /// Overrides the relative gradient tolerance and iteration cap of [`ControlProblem::minimize`].
    pub fn with_solver_limits(mut self, tol: f64, max_iter: usize) -> Result<Self> {
        if !(tol > 0.0 && tol < 1.0) || max_iter == 0 {
            return Err(Error::invalid("CG tolerance must lie in (0, 1) and the iteration cap be positive"));
        }
        self.cg_tol = tol;
        self.cg_max_iter = max_iter;
        Ok(self)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn region(&self) -> &ControlRegion {
        &self.region
    }

    pub fn params(&self) -> &CarlemanParameters {
        &self.params
    }

    pub fn weights(&self) -> &WeightFields {
        &self.weights
    }

    pub fn target(&self) -> &TrackingTarget {
        &self.target
    }

    pub fn operators(&self) -> &StepOperators {
        &self.ops
    }

    /// Number of (cell, node) tracking weights hitting the exponent clamp.
    pub fn saturated_count(&self) -> usize {
        self.saturated.iter().filter(|s| **s).count()
    }

    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * self.time.dt() * self.volume
    }

    fn pack(&self, u: &SpaceTimeField) -> Packed {
        let mut out = Vec::with_capacity(self.control_weight.len());
        for j in 0..self.time.steps {
            let layer = u.layer(j + 1);
            out.extend(self.nodes.iter().map(|&n| layer[n]));
        }
        out
    }

    fn unpack(&self, v: &[f64]) -> SpaceTimeField {
        let mut u = SpaceTimeField::zeros(self.grid.clone(), self.time);
        let nc = self.nodes.len();
        for j in 0..self.time.steps {
            let layer = u.layer_mut(j + 1);
            for (i, &n) in self.nodes.iter().enumerate() {
                layer[n] = v[j * nc + i];
            }
        }
        u
    }

    /// State for a packed control; `affine` adds `y0` and `f`.
    fn state_packed(&self, v: &[f64], affine: bool) -> Result<SpaceTimeField> {
        let src = self.unpack(v);
        if affine {
            self.ops.forward(self.y0.values(), Some(&src), Some(self.f.values()))
        } else {
            let zero = vec![0.0; self.grid.node_count()];
            self.ops.forward(&zero, Some(&src), None)
        }
    }

    /// Raw adjoint for state `y`; with `affine` the residual is taken against the target.
    fn adjoint_raw(&self, y: &SpaceTimeField, affine: bool) -> Result<AdjointTrajectory> {
        let nn = self.grid.node_count();
        let steps = self.time.steps;
        let g = if self.objective.tracking {
            let mut g = SpaceTimeField::zeros(self.grid.clone(), self.time);
            for j in 0..steps {
                let yl = y.layer(j + 1).to_vec();
                let r = self.target.at(j + 1);
                let gl = g.layer_mut(j + 1);
                for n in 0..nn {
                    let e = if affine { yl[n] - r[n] } else { yl[n] };
                    gl[n] = self.tracking_weight[j * nn + n] * e;
                }
            }
            Some(g)
        } else {
            None
        };
        let kappa = self.objective.terminal_weight;
        let last = y.layer(steps);
        let p_t: Vec<f64> = (0..nn)
            .map(|n| {
                let e = if affine { last[n] - self.target.second_half.values()[n] } else { last[n] };
                -kappa * e
            })
            .collect();
        let p_t = ScalarField::new(self.grid.clone(), p_t)?;
        crate::solvers::solve_adjoint_with(&self.ops, g.as_ref(), &p_t)
    }

    /// `2 (c v - m p)` packed.
    fn gradient_packed(&self, v: &[f64], p: &SpaceTimeField) -> Packed {
        let nc = self.nodes.len();
        let mut out = vec![0.0; v.len()];
        for j in 0..self.time.steps {
            let pl = p.layer(j);
            for (i, &n) in self.nodes.iter().enumerate() {
                let idx = j * nc + i;
                out[idx] = 2.0 * (self.control_weight[idx] * v[idx] - pl[n]);
            }
        }
        out
    }

    /// `(control, tracking, terminal)` costs of a control and its state.
    fn costs(&self, v: &[f64], y: &SpaceTimeField) -> (f64, f64, f64) {
        let dt = self.time.dt();
        let control: f64 = v
            .iter()
            .zip(&self.control_weight)
            .map(|(u, c)| c * u * u)
            .sum::<f64>()
            * dt
            * self.volume;
        let nn = self.grid.node_count();
        let mut tracking = 0.0;
        if self.objective.tracking {
            for j in 0..self.time.steps {
                let yl = y.layer(j + 1);
                let r = self.target.at(j + 1);
                for &n in self.grid.interior_nodes() {
                    let e = yl[n] - r[n];
                    tracking += self.tracking_weight[j * nn + n] * e * e;
                }
            }
            tracking *= dt * self.volume;
        }
        let terminal = if self.objective.terminal_weight > 0.0 {
            let last = y.layer(self.time.steps);
            self.objective.terminal_weight
                * self
                    .grid
                    .interior_nodes()
                    .iter()
                    .map(|&n| (last[n] - self.target.second_half.values()[n]).powi(2))
                    .sum::<f64>()
                * self.volume
        } else {
            0.0
        };
        (control, tracking, terminal)
    }

    /// Solves the state equation for `u` and evaluates `Q`.
    pub fn functional_value(&self, u: &SpaceTimeField) -> Result<f64> {
        let v = self.pack(u);
        let y = self.state_packed(&v, true)?;
        let (c, t, e) = self.costs(&v, &y);
        Ok(c + t + e)
    }

    /// Gradient of `Q` in the `dt * volume` inner product, zero outside `omega`.
    pub fn gradient_via_adjoint(&self, u: &SpaceTimeField) -> Result<SpaceTimeField> {
        let v = self.pack(u);
        let y = self.state_packed(&v, true)?;
        let adj = self.adjoint_raw(&y, true)?;
        Ok(self.unpack(&self.gradient_packed(&v, &adj.p)))
    }

    /// Damped CGLS in the scaled unknown `v = sqrt(c) u`, so that
    /// `Q = |v|^2 + |A v + o|^2` with `o` the residual of the uncontrolled state.
    ///
    /// The data residual is updated in the tracking space and the gradient is
    /// recomputed from it by an adjoint solve each iteration. Stops when the
    /// weighted gradient norm is below the tolerance (`CG_TOL` by default) relative to its value at `u = 0`.
    pub fn minimize(&self, warm_start: Option<&SpaceTimeField>) -> Result<OptimalityState> {
        let mut energy = EnergyAudit::clean();
        let nn = self.grid.node_count();
        let steps = self.time.steps;
        let dt = self.time.dt();
        let root_c: Vec<f64> = self.control_weight.iter().map(|c| c.sqrt()).collect();
        let root_w: Vec<f64> = (0..steps * nn)
            .map(|i| {
                if self.objective.tracking && !self.grid.is_boundary(i % nn) {
                    self.tracking_weight[i].sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let root_k = self.objective.terminal_weight.sqrt();
        let interior: Vec<f64> = (0..nn).map(|n| if self.grid.is_boundary(n) { 0.0 } else { 1.0 }).collect();

        // data vectors: tracking block (steps * nn) then terminal block (nn)
        let data_inner = |a: &[f64], b: &[f64]| -> f64 {
            let (ta, ea) = a.split_at(steps * nn);
            let (tb, eb) = b.split_at(steps * nn);
            let t: f64 = ta.iter().zip(tb).map(|(x, y)| x * y).sum();
            let e: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
            (t * dt + e) * self.volume
        };
        let to_data = |y: &SpaceTimeField, affine: bool| -> Vec<f64> {
            let mut out = vec![0.0; (steps + 1) * nn];
            for j in 0..steps {
                let yl = y.layer(j + 1);
                let r = self.target.at(j + 1);
                for n in 0..nn {
                    let e = if affine { yl[n] - r[n] } else { yl[n] };
                    out[j * nn + n] = root_w[j * nn + n] * e;
                }
            }
            let last = y.layer(steps);
            let ys = self.target.second_half.values();
            for n in 0..nn {
                let e = if affine { last[n] - ys[n] } else { last[n] };
                out[steps * nn + n] = root_k * interior[n] * e;
            }
            out
        };
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let u: Packed = v.iter().zip(&root_c).map(|(v, c)| v / c).collect();
            Ok(to_data(&self.state_packed(&u, false)?, false))
        };
        let apply_t = |rho: &[f64], energy: &mut EnergyAudit| -> Result<Packed> {
            let mut g = SpaceTimeField::zeros(self.grid.clone(), self.time);
            for j in 0..steps {
                let gl = g.layer_mut(j + 1);
                for n in 0..nn {
                    gl[n] = root_w[j * nn + n] * rho[j * nn + n];
                }
            }
            let p_t: Vec<f64> = (0..nn).map(|n| -root_k * interior[n] * rho[steps * nn + n]).collect();
            let p_t = ScalarField::new(self.grid.clone(), p_t)?;
            let adj = crate::solvers::solve_adjoint_with(&self.ops, Some(&g), &p_t)?;
            energy.merge(&adj.energy);
            let nc = self.nodes.len();
            let mut out = vec![0.0; root_c.len()];
            for j in 0..steps {
                let pl = adj.p.layer(j);
                for (i, &n) in self.nodes.iter().enumerate() {
                    out[j * nc + i] = -pl[n] / root_c[j * nc + i];
                }
            }
            Ok(out)
        };
        let norm = |a: &[f64]| self.inner(a, a).sqrt();

        let zero = vec![0.0; root_c.len()];
        let y_aff = self.state_packed(&zero, true)?;
        let offset = to_data(&y_aff, true);
        let target_data: Vec<f64> = offset.iter().map(|o| -o).collect();
        let reference = norm(&apply_t(&target_data, &mut energy)?);

        let mut v: Packed = match warm_start {
            Some(w) => self.pack(w).iter().zip(&root_c).map(|(u, c)| u * c).collect(),
            None => zero.clone(),
        };
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = reference == 0.0;
        if converged {
            v = zero.clone();
        } else {
            let av = apply(&v)?;
            let mut rho: Vec<f64> = target_data.iter().zip(&av).map(|(d, a)| d - a).collect();
            let gradient = |rho: &[f64], v: &[f64], energy: &mut EnergyAudit| -> Result<Packed> {
                let at = apply_t(rho, energy)?;
                Ok(at.iter().zip(v).map(|(a, v)| a - v).collect())
            };
            let mut s = gradient(&rho, &v, &mut energy)?;
            let mut d = s.clone();
            let mut gamma = self.inner(&s, &s);
            let value = |v: &[f64], rho: &[f64]| self.inner(v, v) + data_inner(rho, rho);
            let mut best = (gamma.sqrt() / reference, v.clone());
            history.push(ConvergenceRecord {
                iteration: 0,
                functional: value(&v, &rho),
                relative_gradient: best.0,
            });
            while iterations < self.cg_max_iter {
                let g_norm = gamma.sqrt();
                if g_norm <= self.cg_tol * reference {
                    // replace the recursively updated residual and confirm
                    let av = apply(&v)?;
                    for i in 0..rho.len() {
                        rho[i] = target_data[i] - av[i];
                    }
                    s = gradient(&rho, &v, &mut energy)?;
                    gamma = self.inner(&s, &s);
                    if gamma.sqrt() <= self.cg_tol * reference {
                        converged = true;
                        break;
                    }
                    d.clone_from(&s);
                }
                iterations += 1;
                let q = apply(&d)?;
                let curvature = data_inner(&q, &q) + self.inner(&d, &d);
                if !(curvature > 0.0 && curvature.is_finite()) {
                    break;
                }
                let step = gamma / curvature;
                for i in 0..v.len() {
                    v[i] += step * d[i];
                }
                for i in 0..rho.len() {
                    rho[i] -= step * q[i];
                }
                s = gradient(&rho, &v, &mut energy)?;
                let gamma_new = self.inner(&s, &s);
                if !gamma_new.is_finite() {
                    break;
                }
                let beta = gamma_new / gamma;
                gamma = gamma_new;
                for i in 0..d.len() {
                    d[i] = s[i] + beta * d[i];
                }
                let rel = gamma.sqrt() / reference;
                history.push(ConvergenceRecord {
                    iteration: iterations,
                    functional: value(&v, &rho),
                    relative_gradient: rel,
                });
                if rel < best.0 {
                    best = (rel, v.clone());
                }
            }
            if !converged {
                v = best.1;
            }
        }

        let u: Packed = v.iter().zip(&root_c).map(|(v, c)| v / c).collect();
        // superposition keeps the final state consistent with the iteration
        let y = y_aff.zip_map(&self.state_packed(&u, false)?, |a, b| a + b);
        let adj = self.adjoint_raw(&y, true)?;
        energy.merge(&adj.energy);
        // weighted (C^{-1}) norm of the true gradient, and of u - p / c in the C norm
        let grad = self.gradient_packed(&u, &adj.p);
        let scaled: Packed = grad.iter().zip(&root_c).map(|(g, c)| g / (2.0 * c)).collect();
        let gradient_norm = if reference > 0.0 { norm(&scaled) / reference } else { 0.0 };
        let v_norm = norm(&v);
        let pontryagin_residual = if v_norm > 0.0 { norm(&scaled) / v_norm } else { norm(&scaled) };
        let (control_cost, tracking_cost, terminal_cost) = self.costs(&u, &y);
        let u_field = self.unpack(&u);
        let p_scaled = scale_field(&adj.p, 1.0 / self.params.s3l3());
        let p = AdjointTrajectory {
            terminal: adj.terminal.map(|v| v / self.params.s3l3()),
            p: p_scaled,
            energy: adj.energy,
        };
        let saturation = self.saturation_report(&y);
        Ok(OptimalityState {
            u: u_field,
            y: Trajectory {
                state: y,
                newton_iterations: vec![0; self.time.steps],
                residuals: vec![0.0; self.time.steps],
            },
            p,
            functional_value: control_cost + tracking_cost + terminal_cost,
            control_cost,
            tracking_cost,
            terminal_cost,
            gradient_norm,
            cg_iterations: iterations,
            converged,
            pontryagin_residual,
            history,
            energy,
            saturation,
        })
    }

    fn saturation_report(&self, y: &SpaceTimeField) -> SaturationReport {
        let nn = self.grid.node_count();
        let mut entries = 0;
        let mut max_residual: f64 = 0.0;
        for j in 0..self.time.steps {
            let r = self.target.at(j + 1);
            let yl = y.layer(j + 1);
            for n in 0..nn {
                if self.saturated[j * nn + n] && !self.grid.is_boundary(n) {
                    entries += 1;
                    max_residual = max_residual.max((yl[n] - r[n]).abs());
                }
            }
        }
        SaturationReport {
            entries,
            max_residual,
            pass: max_residual <= SaturationReport::TOL,
        }
    }

    /// Checks `Q = <y_s - Y^{K/2}, p^{K/2}> + sum dt <(b_z - b_target) grad target, grad p>`
    /// at a computed optimum (raw, unnormalized adjoint).
    pub fn duality_audit(&self, model: &NonlinearityModel, state: &OptimalityState) -> DualityAudit {
        let grid = &self.grid;
        let dt = self.time.dt();
        let scale = self.params.s3l3();
        let p_layer = |k: usize| -> Vec<f64> { state.p.p.layer(k).iter().map(|v| v * scale).collect() };
        let half = self.target.switch_layer;
        let ys = self.target.second_half.values();
        let y_half = self.target.first_half.layer(half);
        let ph = p_layer(half);
        let mut rhs = 0.0;
        if self.objective.tracking {
            rhs += grid
                .interior_nodes()
                .iter()
                .map(|&n| (ys[n] - y_half[n]) * ph[n])
                .sum::<f64>()
                * self.volume;
        }
        for k in 0..self.time.steps {
            let r = if self.objective.tracking {
                self.target.at(k + 1)
            } else {
                ys
            };
            let pk = p_layer(k);
            let target_faces = FaceCoefficients::from_nodal(grid, r, |u, v| model.secant(u, v));
            let with_z = face_gradient_pairing(grid, self.ops.faces(k), r, &pk);
            let with_target = face_gradient_pairing(grid, &target_faces, r, &pk);
            rhs += dt * (with_z - with_target);
        }
        if !self.objective.tracking {
            // without tracking the identity runs over the whole interval from y0
            let y0 = self.y0.values();
            let p0 = p_layer(0);
            rhs += grid
                .interior_nodes()
                .iter()
                .map(|&n| (ys[n] - y0[n]) * p0[n])
                .sum::<f64>()
                * self.volume;
        }
        let lhs = state.functional_value;
        let relative = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        DualityAudit { lhs, rhs, relative }
    }
}

fn scale_field(f: &SpaceTimeField, factor: f64) -> SpaceTimeField {
    let data = f.data().iter().map(|v| v * factor).collect();
    SpaceTimeField::from_flat(f.grid().clone(), f.time(), data).expect("same shape")
}

/// `u^{k+1} = m p^k e^{2 s alpha_k} s^3 lambda^3 phi_k^3`, `u^0 = 0`.
pub fn reconstruct_control(
    p: &AdjointTrajectory,
    weights: &WeightFields,
    params: &CarlemanParameters,
    region: &ControlRegion,
) -> SpaceTimeField {
    let grid = p.p.grid().clone();
    let time = p.p.time();
    let mask = region.indicator();
    let s3l3 = params.s3l3();
    let mut u = SpaceTimeField::zeros(grid.clone(), time);
    for j in 0..time.steps {
        let pl = p.p.layer(j).to_vec();
        let ul = u.layer_mut(j + 1);
        for n in 0..grid.node_count() {
            if mask[n] > 0.0 && pl[n] != 0.0 {
                ul[n] = pl[n] * weights.exp_weight(2.0 * params.s, j, n) * s3l3 * weights.phi(j, n).powi(3);
            }
        }
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iteration: usize,
    pub functional: f64,
    pub relative_gradient: f64,
}

/// Tracking entries whose weight hit the exponent clamp, and the largest
/// tracking residual there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub entries: usize,
    pub max_residual: f64,
    pub pass: bool,
}

impl SaturationReport {
    pub const TOL: f64 = 1e-12;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityAudit {
    pub lhs: f64,
    pub rhs: f64,
    pub relative: f64,
}

/// Minimizer with its state, normalized adjoint and solver statistics.
#[derive(Debug, Clone)]
pub struct OptimalityState {
    pub u: SpaceTimeField,
    pub y: Trajectory,
    /// Adjoint divided by `s^3 lambda^3`, so that `u = m p e^{2 s alpha} s^3 lambda^3 phi^3`.
    pub p: AdjointTrajectory,
    pub functional_value: f64,
    pub control_cost: f64,
    pub tracking_cost: f64,
    pub terminal_cost: f64,
    /// Preconditioned gradient norm relative to its value at `u = 0`.
    pub gradient_norm: f64,
    pub cg_iterations: usize,
    pub converged: bool,
    pub pontryagin_residual: f64,
    pub history: Vec<ConvergenceRecord>,
    pub energy: EnergyAudit,
    pub saturation: SaturationReport,
}

impl OptimalityState {
    /// Errors with `MaxIterations` unless the CG loop met its tolerance.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterations {
                iterations: self.cg_iterations,
                gradient: self.gradient_norm,
            })
        }
    }

    pub fn write_history_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iteration,functional,relative_gradient")?;
        for r in &self.history {
            writeln!(out, "{},{},{}", r.iteration, r.functional, r.relative_gradient)?;
        }
        Ok(())
    }

    /// `|y^k - y_s|_2` at the last layer.
    pub fn terminal_error(&self, y_s: &ScalarField) -> f64 {
        let grid = y_s.grid();
        let last = self.y.state.layer(self.y.state.time().steps);
        let diff: Vec<f64> = last.iter().zip(y_s.values()).map(|(a, b)| a - b).collect();
        crate::discretization::lq_norm_values(grid, &diff, 2.0).expect("q = 2")
    }
}

/// Terminal-penalty variant: control cost plus `|y(T) - y_s|^2 / epsilon`.
#[derive(Debug, Clone)]
pub struct PenalizedProblem {
    inner: ControlProblem,
    epsilon: f64,
}

impl PenalizedProblem {
    pub fn new(base: &ControlProblem, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let mut inner = base.clone();
        inner.objective = Objective {
            tracking: false,
            terminal_weight: 1.0 / epsilon,
        };
        Ok(PenalizedProblem { inner, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn problem(&self) -> &ControlProblem {
        &self.inner
    }

    pub fn minimize(&self, warm_start: Option<&SpaceTimeField>) -> Result<OptimalityState> {
        self.inner.minimize(warm_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenalizedPoint {
    pub epsilon: f64,
    pub terminal_error: f64,
    pub control_cost: f64,
    /// `control_cost + terminal_error^2 / epsilon`.
    pub bound_quantity: f64,
    pub cg_iterations: usize,
    pub converged: bool,
}

/// Solves the penalized problem for each `epsilon` (decreasing), warm-starting
/// each solve from the previous control.
pub fn penalized_minimize(base: &ControlProblem, epsilons: &[f64]) -> Result<Vec<PenalizedPoint>> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("epsilon list must be strictly decreasing"));
    }
    let mut out = Vec::with_capacity(epsilons.len());
    let mut warm: Option<SpaceTimeField> = None;
    for &eps in epsilons {
        let problem = PenalizedProblem::new(base, eps)?;
        let state = problem.minimize(warm.as_ref())?.require_converged()?;
        let terminal_error = state.terminal_error(&base.target.second_half);
        out.push(PenalizedPoint {
            epsilon: eps,
            terminal_error,
            control_cost: state.control_cost,
            bound_quantity: state.control_cost + state.terminal_cost,
            cg_iterations: state.cg_iterations,
            converged: state.converged,
        });
        warm = Some(state.u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{construct_psi, SpatialDomain};
    use crate::nonlinearity::{manufactured_forcing, ModelSpec};
    use crate::solvers::solve_uncontrolled;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    struct Setup {
        model: NonlinearityModel,
        problem: ControlProblem,
        ys: ScalarField,
    }

    const HORIZON: f64 = 0.1;

    fn setup(nodes: usize, steps: usize, s: f64, model: NonlinearityModel, amplitude: f64, z_from_y: bool) -> Setup {
        setup_on(HORIZON, nodes, steps, s, model, amplitude, z_from_y)
    }

    fn setup_on(
        horizon: f64,
        nodes: usize,
        steps: usize,
        s: f64,
        model: NonlinearityModel,
        amplitude: f64,
        z_from_y: bool,
    ) -> Setup {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap());
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let tg = TimeGrid::new(horizon, steps).unwrap();
        let params = CarlemanParameters::new(1.0, s, horizon, psi.sup_norm(), false).unwrap();
        let weights = WeightFields::for_time_grid(&psi, &params, &tg).unwrap();
        let ys = ScalarField::from_fn(grid.clone(), |x| 0.2 * (PI * x[0]).sin());
        let f = manufactured_forcing(&model, &ys);
        let y0 = ScalarField::from_fn(grid.clone(), |x| 0.2 * (PI * x[0]).sin() + amplitude * (2.0 * PI * x[0]).sin());
        let big_y = solve_uncontrolled(&model, &y0, &f, tg).unwrap().state;
        let z = if z_from_y {
            big_y.clone()
        } else {
            SpaceTimeField::from_fn(grid.clone(), tg, |x, t| 0.3 * (PI * x[0]).sin() * (1.0 + t))
        };
        let target = TrackingTarget::new(big_y, ys.clone()).unwrap();
        let problem = ControlProblem::new(&model, region, weights, params, target, &z, y0, f).unwrap();
        Setup { model, problem, ys }
    }

    fn cubic() -> NonlinearityModel {
        NonlinearityModel::new(ModelSpec::Cubic { beta: 1.0 }, (-10.0, 10.0)).unwrap()
    }

    fn random_control(p: &ControlProblem, rng: &mut ChaCha8Rng, scale: f64) -> SpaceTimeField {
        let mut u = SpaceTimeField::zeros(p.grid.clone(), p.time);
        let mask = p.region.indicator().to_vec();
        for k in 1..p.time.layers() {
            for (n, v) in u.layer_mut(k).iter_mut().enumerate() {
                *v = mask[n] * scale * rng.gen_range(-1.0..1.0);
            }
        }
        u
    }

    #[test]
    fn zero_control_at_stationary_data_costs_nothing() {
        let set = setup(33, 32, 2e-4, cubic(), 0.0, true);
        let u = SpaceTimeField::zeros(set.problem.grid.clone(), set.problem.time);
        assert!(set.problem.functional_value(&u).unwrap() < 1e-20);
        assert!(set.problem.gradient_via_adjoint(&u).unwrap().sup_norm() < 1e-9);
        let state = set.problem.minimize(None).unwrap();
        assert!(state.u.sup_norm() < 1e-10, "{}", state.u.sup_norm());
        assert!(state.functional_value < 1e-20);
    }

    #[test]
    fn zero_control_costs_only_second_half_tracking() {
        let set = setup(33, 32, 2e-4, cubic(), 0.05, true);
        let p = &set.problem;
        let u = SpaceTimeField::zeros(p.grid.clone(), p.time);
        let q = p.functional_value(&u).unwrap();
        // independent evaluation of the second-half term from Y and y_s
        let big_y = &p.target.first_half;
        let dt = p.time.dt();
        let h = p.grid.spacing(0);
        let mut oracle = 0.0;
        for j in p.time.steps / 2..p.time.steps {
            for &n in p.grid.interior_nodes() {
                let e = big_y.layer(j + 1)[n] - set.ys.values()[n];
                oracle += dt * h * p.weights.exp_weight(-2.0 * p.params.s, j, n) * e * e;
            }
        }
        assert!((q - oracle).abs() <= 1e-12 * oracle, "{q} vs {oracle}");
    }

    #[test]
    fn functional_is_nonnegative_and_strictly_convex() {
        let set = setup(33, 32, 2e-4, cubic(), 0.05, false);
        let p = &set.problem;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let u = random_control(p, &mut rng, 0.1);
            let d = random_control(p, &mut rng, 1.0);
            let q = p.functional_value(&u).unwrap();
            assert!(q >= 0.0);
            let h = 1e-2;
            let plus = p.functional_value(&add(&u, &d, h)).unwrap();
            let minus = p.functional_value(&add(&u, &d, -h)).unwrap();
            assert!(plus + minus - 2.0 * q > 0.0);
        }
    }

    fn add(u: &SpaceTimeField, d: &SpaceTimeField, h: f64) -> SpaceTimeField {
        u.zip_map(d, |a, b| a + h * b)
    }

    fn directional_check(p: &ControlProblem, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_control(p, &mut rng, 0.1);
        let grad = p.gradient_via_adjoint(&u).unwrap();
        for _ in 0..4 {
            let d = random_control(p, &mut rng, 1.0);
            let h = 1e-5;
            let fd = (p.functional_value(&add(&u, &d, h)).unwrap() - p.functional_value(&add(&u, &d, -h)).unwrap())
                / (2.0 * h);
            let dt = p.time.dt();
            let vol = p.grid.cell_volume();
            let exact: f64 = grad.data().iter().zip(d.data()).map(|(g, d)| g * d).sum::<f64>() * dt * vol;
            assert!((fd - exact).abs() <= 1e-5 * exact.abs(), "fd {fd} vs adjoint {exact}");
        }
        for (g, m) in grad.layer(3).iter().zip(p.region.indicator()) {
            if *m == 0.0 {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (nodes, steps) in [(17, 16), (33, 32), (65, 64)] {
            let set = setup(nodes, steps, 2e-4, cubic(), 0.05, false);
            directional_check(&set.problem, nodes as u64);
            let pen = PenalizedProblem::new(&set.problem, 0.01).unwrap();
            directional_check(pen.problem(), 1 + nodes as u64);
        }
    }

    #[test]
    fn zero_data_gives_zero_gradient() {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, 17).unwrap());
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let tg = TimeGrid::new(1.0, 16).unwrap();
        let params = CarlemanParameters::new(1.0, 0.02, 1.0, psi.sup_norm(), false).unwrap();
        let weights = WeightFields::for_time_grid(&psi, &params, &tg).unwrap();
        let zero = ScalarField::zeros(grid.clone());
        let target = TrackingTarget::new(SpaceTimeField::zeros(grid.clone(), tg), zero.clone()).unwrap();
        let z = SpaceTimeField::zeros(grid.clone(), tg);
        let p = ControlProblem::new(&cubic(), region, weights, params, target, &z, zero.clone(), zero).unwrap();
        let u = SpaceTimeField::zeros(grid, tg);
        assert_eq!(p.gradient_via_adjoint(&u).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn minimizer_satisfies_optimality_conditions() {
        let set = setup_on(1.0, 33, 64, 1e-3, cubic(), 0.05, true);
        let p = &set.problem;
        let state = p.minimize(None).unwrap();
        assert!(state.converged, "cg stopped at {}", state.gradient_norm);
        assert!(state.pontryagin_residual < 1e-8, "{}", state.pontryagin_residual);
        let grad = p.gradient_via_adjoint(&state.u).unwrap();
        let vol = p.grid.cell_volume() * p.time.dt();
        let gnorm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt() * vol.sqrt();
        let unorm = state.u.data().iter().map(|g| g * g).sum::<f64>().sqrt() * vol.sqrt();
        assert!(gnorm <= 1e-8 * (1.0 + unorm), "{gnorm}");
        let audit = p.duality_audit(&set.model, &state);
        assert!(audit.relative < 1e-8, "{audit:?}");
        assert!(state.energy.passed());
        // history decreases
        for w in state.history.windows(2) {
            assert!(w[1].functional <= w[0].functional * (1.0 + 1e-9) + 1e-300);
        }
    }

    #[test]
    fn control_vanishes_at_both_ends_under_strong_weights() {
        let set = setup(33, 128, 2e-4, cubic(), 0.05, true);
        let p = &set.problem;
        let state = p.minimize(None).unwrap();
        assert!(state.converged);
        let umax = state.u.sup_norm();
        let first = state.u.layer(1).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let last = state.u.layer(p.time.steps).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(first <= 1e-6 * umax && last <= 1e-6 * umax, "{first} {last} {umax}");
    }

    #[test]
    fn penalized_sweep_tightens_terminal_error() {
        let set = setup(33, 64, 2e-4, NonlinearityModel::linear(1.0).unwrap(), 0.05, true);
        let eps: Vec<f64> = (0..6).map(|i| 1e-2 * 0.5f64.powi(i)).collect();
        let pts = penalized_minimize(&set.problem, &eps).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].terminal_error <= w[0].terminal_error);
        }
        let huge = penalized_minimize(&set.problem, &[1e12]).unwrap();
        let free = set.problem.target.first_half.last().zip_map(&set.ys, |a, b| a - b);
        let free_err = crate::discretization::lq_norm(&free, 2.0).unwrap();
        assert!((huge[0].terminal_error - free_err).abs() < 1e-4 * free_err);
        assert!(huge[0].terminal_error <= free_err && huge[0].control_cost < 1e-20);
    }

    #[test]
    fn reconstruct_formula() {
        let set = setup(17, 16, 2e-4, cubic(), 0.05, true);
        let p = &set.problem;
        let ones = SpaceTimeField::from_fn(p.grid.clone(), p.time, |_, _| 1.0);
        let adj = AdjointTrajectory {
            p: ones,
            terminal: ScalarField::zeros(p.grid.clone()),
            energy: EnergyAudit::clean(),
        };
        let u = reconstruct_control(&adj, &p.weights, &p.params, &p.region);
        let s3l3 = p.params.s3l3();
        for j in 0..p.time.steps {
            for n in 0..p.grid.node_count() {
                let expect = if p.region.indicator()[n] > 0.0 {
                    (2.0 * p.params.s * p.weights.alpha(j, n)).exp() * s3l3 * p.weights.phi(j, n).powi(3)
                } else {
                    0.0
                };
                assert!((u.layer(j + 1)[n] - expect).abs() <= 1e-14 * expect.abs());
            }
        }
        assert_eq!(u.layer(0).iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }
}
