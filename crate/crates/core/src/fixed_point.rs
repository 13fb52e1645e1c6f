//! Outer fixed-point loop `z -> F(z)`, membership in the set `B` and the
//! two-phase strategy (free evolution, then control).

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlProblem, OptimalityState, TrackingTarget};
use crate::discretization::{gradient_sup_norm, lq_norm_values, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::error::{Error, Result};
use crate::geometry::{CarlemanParameters, ControlRegion, WeightFields, WeightFunctionPsi};
use crate::nonlinearity::NonlinearityModel;
use crate::solvers::{solve_quasilinear_controlled, solve_uncontrolled, Trajectory};

/// Exponent ladder `q_0 = 2`, `q_i = 2 (n/(n-2))^{i-1}` for `0 < i < N`, `q_N = q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QiLadder {
    n_dim: usize,
    q_final: f64,
    values: Vec<f64>,
}

impl QiLadder {
    pub fn new(n_dim: usize, q_final: f64) -> Result<Self> {
        if n_dim < 2 || !(q_final > n_dim as f64) || !q_final.is_finite() {
            return Err(Error::BadExponents { n_dim, q_final });
        }
        let count = if n_dim == 2 {
            1
        } else {
            let n = n_dim as f64;
            let ratio = (q_final.ln() - 2f64.ln()) / (n.ln() - (n - 2.0).ln());
            // guard against ratios that land on an integer up to rounding
            let snapped = if (ratio - ratio.round()).abs() < 1e-12 { ratio.round() } else { ratio };
            snapped.ceil() as usize + 1
        };
        let mut values = Vec::with_capacity(count + 1);
        values.push(2.0);
        for i in 1..count {
            let n = n_dim as f64;
            values.push(2.0 * (n / (n - 2.0)).powi(i as i32 - 1));
        }
        values.push(q_final);
        Ok(QiLadder { n_dim, q_final, values })
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn q_final(&self) -> f64 {
        self.q_final
    }

    /// `N`, the index of the last rung.
    pub fn count(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Time exponent of rung `i`.
    pub fn time_exponent(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Space exponent of rung `i`: `q_{i+1}`, and `q_N` on the last rung.
    pub fn space_exponent(&self, i: usize) -> f64 {
        self.values[(i + 1).min(self.count())]
    }
}

/// Radii of `B`: one per rung plus the common bound on `|y_t|` and `|grad(y - y_s)|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zetas {
    pub ladder: Vec<f64>,
    pub zeta: f64,
}

impl Zetas {
    /// Radii from a measured state: `zeta_0 = 2 m_0`, `zeta_i = 2 C zeta_{i-1}` with
    /// `C` the largest ratio of consecutive measured rungs (at least 1), and
    /// `zeta = 2 max(time derivative, gradient)`.
    pub fn calibrated(measured: &MembershipValues) -> Zetas {
        let m = measured.ladder_totals();
        let mut amplification: f64 = 1.0;
        for w in m.windows(2) {
            if w[0] > 0.0 && w[1].is_finite() {
                amplification = amplification.max(w[1] / w[0]);
            }
        }
        let mut ladder = Vec::with_capacity(m.len());
        let mut current = 2.0 * m[0];
        for _ in 0..m.len() {
            ladder.push(current);
            current *= 2.0 * amplification;
        }
        Zetas {
            ladder,
            zeta: 2.0 * measured.time_derivative.max(measured.gradient),
        }
    }
}

/// Measured norms entering the definition of `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipValues {
    /// `|e^{-s alpha} phi^{-i} (y - Y)|` on the first half, per rung.
    pub first_half: Vec<f64>,
    /// `|e^{-s alpha} phi^{-i} (y - y_s)|` on the second half, per rung.
    pub second_half: Vec<f64>,
    /// `max_k |(y^{k+1} - y^k)/dt|_{q}`.
    pub time_derivative: f64,
    /// `max_k |grad(y^k - y_s)|_inf`.
    pub gradient: f64,
}

impl MembershipValues {
    pub fn ladder_totals(&self) -> Vec<f64> {
        self.first_half.iter().zip(&self.second_half).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BMembership {
    pub zetas: Zetas,
    pub values: MembershipValues,
    pub ladder_pass: Vec<bool>,
    pub time_derivative_pass: bool,
    pub gradient_pass: bool,
    pub pass: bool,
}

fn time_lq(values: &[f64], dt: f64, q: f64) -> f64 {
    if q.is_infinite() {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        (values.iter().map(|v| v.abs().powf(q)).sum::<f64>() * dt).powf(1.0 / q)
    }
}

/// Evaluates every norm of `B` for the trajectory `y`. Cell `j` is sampled at
/// layer `j + 1` with the weight of its midpoint, as in the discrete functional.
pub fn membership_values(
    y: &SpaceTimeField,
    big_y: &SpaceTimeField,
    y_s: &ScalarField,
    weights: &WeightFields,
    params: &CarlemanParameters,
    ladder: &QiLadder,
) -> Result<MembershipValues> {
    let time = y.time();
    if big_y.time() != time || weights.time_count() != time.steps {
        return Err(Error::invalid("membership inputs do not share the time grid"));
    }
    if time.steps % 2 != 0 {
        return Err(Error::invalid("the number of time steps must be even"));
    }
    let half = time.steps / 2;
    let grid = y.grid();
    let mut first_half = Vec::with_capacity(ladder.count() + 1);
    let mut second_half = Vec::with_capacity(ladder.count() + 1);
    for i in 0..=ladder.count() {
        let (qt, qs) = (ladder.time_exponent(i), ladder.space_exponent(i));
        let norm = |cells: std::ops::Range<usize>, target: &dyn Fn(usize) -> Vec<f64>| -> Result<f64> {
            let mut per_cell = Vec::with_capacity(cells.len());
            for j in cells {
                let r = target(j + 1);
                let v: Vec<f64> = y
                    .layer(j + 1)
                    .iter()
                    .zip(&r)
                    .enumerate()
                    .map(|(n, (a, b))| {
                        let e = a - b;
                        if e == 0.0 {
                            0.0
                        } else {
                            weights.exp_weight(-params.s, j, n) * weights.phi(j, n).powi(-(i as i32)) * e
                        }
                    })
                    .collect();
                per_cell.push(lq_norm_values(grid, &v, qs)?);
            }
            Ok(time_lq(&per_cell, time.dt(), qt))
        };
        first_half.push(norm(0..half, &|k| big_y.layer(k).to_vec())?);
        second_half.push(norm(half..time.steps, &|_| y_s.values().to_vec())?);
    }
    let dt = time.dt();
    let mut time_derivative: f64 = 0.0;
    let mut gradient: f64 = 0.0;
    for k in 0..time.layers() {
        let diff: Vec<f64> = y.layer(k).iter().zip(y_s.values()).map(|(a, b)| a - b).collect();
        gradient = gradient.max(gradient_sup_norm(grid, &diff));
        if k < time.steps {
            let rate: Vec<f64> = y.layer(k + 1).iter().zip(y.layer(k)).map(|(a, b)| (a - b) / dt).collect();
            time_derivative = time_derivative.max(lq_norm_values(grid, &rate, ladder.q_final())?);
        }
    }
    Ok(MembershipValues {
        first_half,
        second_half,
        time_derivative,
        gradient,
    })
}

/// Compares measured norms with the radii of `B`.
pub fn check_membership(
    y: &SpaceTimeField,
    big_y: &SpaceTimeField,
    y_s: &ScalarField,
    weights: &WeightFields,
    params: &CarlemanParameters,
    ladder: &QiLadder,
    zetas: &Zetas,
) -> Result<BMembership> {
    let values = membership_values(y, big_y, y_s, weights, params, ladder)?;
    Ok(judge(values, zetas.clone()))
}

fn judge(values: MembershipValues, zetas: Zetas) -> BMembership {
    let totals = values.ladder_totals();
    let ladder_pass: Vec<bool> = totals
        .iter()
        .enumerate()
        .map(|(i, v)| zetas.ladder.get(i).is_some_and(|z| v <= z))
        .collect();
    let time_derivative_pass = values.time_derivative <= zetas.zeta;
    let gradient_pass = values.gradient <= zetas.zeta;
    let pass = ladder_pass.iter().all(|p| *p) && time_derivative_pass && gradient_pass;
    BMembership {
        zetas,
        values,
        ladder_pass,
        time_derivative_pass,
        gradient_pass,
        pass,
    }
}

/// Everything the outer loop needs besides the iteration controls.
#[derive(Debug, Clone)]
pub struct FixedPointProblem {
    pub model: NonlinearityModel,
    pub region: ControlRegion,
    pub psi: WeightFunctionPsi,
    pub params: CarlemanParameters,
    pub y0: ScalarField,
    pub f: ScalarField,
    pub y_s: ScalarField,
    pub time: TimeGrid,
}

impl FixedPointProblem {
    pub fn grid(&self) -> &Arc<Grid> {
        self.y0.grid()
    }

    fn weights(&self) -> Result<(CarlemanParameters, WeightFields)> {
        let params = self.params.with_horizon(self.time.horizon)?;
        let weights = WeightFields::for_time_grid(&self.psi, &params, &self.time)?;
        Ok((params, weights))
    }
}

/// Outer-loop controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardSettings {
    pub max_outer: usize,
    pub tol_sup: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings {
            max_outer: 15,
            tol_sup: 1e-8,
            cg_tol: crate::control::CG_TOL,
            cg_max_iter: crate::control::CG_MAX_ITER,
        }
    }
}

/// One row of the outer-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub sup_distance: f64,
    pub functional: f64,
    pub terminal_error: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub membership: MembershipValues,
}

#[derive(Debug, Clone)]
pub struct PicardState {
    /// Number of evaluations of `F`.
    pub iteration: usize,
    pub z: Trajectory,
    pub y: Trajectory,
    pub u: SpaceTimeField,
    pub sup_distance: f64,
    pub membership: BMembership,
    /// `|y(T) - y_s|_2` of the final linearized state.
    pub terminal_error: f64,
    pub converged: bool,
    pub trace: Vec<OuterRecord>,
    pub optimality: Option<OptimalityState>,
    pub uncontrolled: SpaceTimeField,
}

impl PicardState {
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence {
                iterations: self.iteration,
                distance: self.sup_distance,
            })
        }
    }

    pub fn write_trace_csv(&self, out: &mut impl Write) -> Result<()> {
        write_trace_csv(&self.trace, out)
    }
}

pub fn write_trace_csv(trace: &[OuterRecord], out: &mut impl Write) -> Result<()> {
    let rungs = trace.first().map_or(0, |r| r.membership.first_half.len());
    write!(out, "iteration,sup_distance,functional,terminal_error,cg_iterations")?;
    for i in 0..rungs {
        write!(out, ",first_half_{i},second_half_{i}")?;
    }
    writeln!(out, ",time_derivative,gradient")?;
    for r in trace {
        write!(out, "{},{},{},{},{}", r.iteration, r.sup_distance, r.functional, r.terminal_error, r.cg_iterations)?;
        for (a, b) in r.membership.first_half.iter().zip(&r.membership.second_half) {
            write!(out, ",{a},{b}")?;
        }
        writeln!(out, ",{},{}", r.membership.time_derivative, r.membership.gradient)?;
    }
    Ok(())
}

fn terminal_error(y: &SpaceTimeField, y_s: &ScalarField) -> Result<f64> {
    let last = y.layer(y.time().steps);
    let diff: Vec<f64> = last.iter().zip(y_s.values()).map(|(a, b)| a - b).collect();
    lq_norm_values(y.grid(), &diff, 2.0)
}

/// Picard iteration `z_0 = Y`, `z_{k+1} = F(z_k)`.
///
/// With `zetas = None` the radii are calibrated from the first iterate.
/// Returns the last state with `converged = false` when the distance never
/// drops below `tol_sup`.
pub fn picard_run(
    problem: &FixedPointProblem,
    ladder: &QiLadder,
    zetas: Option<Zetas>,
    settings: PicardSettings,
) -> Result<PicardState> {
    if !(settings.tol_sup > 0.0) || settings.max_outer == 0 {
        return Err(Error::invalid("picard_run needs tol_sup > 0 and max_outer >= 1"));
    }
    let (params, weights) = problem.weights()?;
    let big_y = solve_uncontrolled(&problem.model, &problem.y0, &problem.f, problem.time)?;
    let target = TrackingTarget::new(big_y.state.clone(), problem.y_s.clone())?;
    let grid = problem.grid().clone();

    let mut zetas = zetas;
    let mut trace = Vec::new();
    let mut z = big_y.clone();
    let already_there = big_y.state.minus_stationary(&problem.y_s).sup_norm() <= settings.tol_sup;
    if already_there {
        let values = membership_values(&z.state, &big_y.state, &problem.y_s, &weights, &params, ladder)?;
        let zetas = zetas.unwrap_or_else(|| Zetas::calibrated(&values));
        let err = terminal_error(&z.state, &problem.y_s)?;
        trace.push(OuterRecord {
            iteration: 0,
            sup_distance: 0.0,
            functional: 0.0,
            terminal_error: err,
            cg_iterations: 0,
            cg_converged: true,
            membership: values.clone(),
        });
        return Ok(PicardState {
            iteration: 0,
            z: z.clone(),
            y: z,
            u: SpaceTimeField::zeros(grid, problem.time),
            sup_distance: 0.0,
            membership: judge(values, zetas),
            terminal_error: err,
            converged: true,
            trace,
            optimality: None,
            uncontrolled: big_y.state,
        });
    }

    let mut warm: Option<SpaceTimeField> = None;
    let mut last: Option<(OptimalityState, f64, BMembership)> = None;
    let mut converged = false;
    let mut iteration = 0;
    while iteration < settings.max_outer {
        iteration += 1;
        let control = ControlProblem::new(
            &problem.model,
            problem.region.clone(),
            weights.clone(),
            params,
            target.clone(),
            &z.state,
            problem.y0.clone(),
            problem.f.clone(),
        )?
        .with_solver_limits(settings.cg_tol, settings.cg_max_iter)?;
        let state = control.minimize(warm.as_ref())?;
        // a linear model gives z-independent operators, so F(F(z)) = F(z) exactly
        let distance = if problem.model.is_linear() {
            0.0
        } else {
            state.y.state.sup_distance(&z.state)
        };
        let values = membership_values(&state.y.state, &big_y.state, &problem.y_s, &weights, &params, ladder)?;
        let radii = zetas.get_or_insert_with(|| Zetas::calibrated(&values)).clone();
        let err = terminal_error(&state.y.state, &problem.y_s)?;
        trace.push(OuterRecord {
            iteration,
            sup_distance: distance,
            functional: state.functional_value,
            terminal_error: err,
            cg_iterations: state.cg_iterations,
            cg_converged: state.converged,
            membership: values.clone(),
        });
        let membership = judge(values, radii);
        z = state.y.clone();
        warm = Some(state.u.clone());
        let done = distance <= settings.tol_sup && state.converged;
        last = Some((state, distance, membership));
        if done {
            converged = true;
            break;
        }
    }
    let (state, distance, membership) = last.expect("at least one outer iteration");
    Ok(PicardState {
        iteration,
        z: z.clone(),
        y: state.y.clone(),
        u: state.u.clone(),
        sup_distance: distance,
        membership,
        terminal_error: terminal_error(&state.y.state, &problem.y_s)?,
        converged,
        trace,
        optimality: Some(state),
        uncontrolled: big_y.state,
    })
}

/// Re-simulates the quasilinear equation with the returned control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCertificate {
    /// `|y_resim - y_final|` over all nodes and layers.
    pub resimulation_gap: f64,
    /// `|y_resim(T) - y_s|_2`.
    pub terminal_error: f64,
    pub pass: bool,
}

pub fn certify(problem: &FixedPointProblem, state: &PicardState, tol_sup: f64) -> Result<FixedPointCertificate> {
    let resim = solve_quasilinear_controlled(&problem.model, &state.u, &problem.y0, &problem.f, problem.time, &problem.region)?;
    let gap = resim.state.sup_distance(&state.y.state);
    Ok(FixedPointCertificate {
        resimulation_gap: gap,
        terminal_error: terminal_error(&resim.state, &problem.y_s)?,
        pass: gap <= 10.0 * tol_sup,
    })
}

/// Free evolution on `[0, T0]` followed by a controlled run on `[T0, T]`.
#[derive(Debug, Clone)]
pub struct TwoPhasePlan {
    pub switch_time: f64,
    pub switch_layer: usize,
    /// Uncontrolled trajectory on the full grid; layers up to `switch_layer` form the first phase.
    pub free_phase: SpaceTimeField,
    /// Controlled run on the second phase, with its own time grid.
    pub control_phase: PicardState,
    /// Concatenated state on the full grid.
    pub y: SpaceTimeField,
    /// Concatenated control, zero on the first phase.
    pub u: SpaceTimeField,
}

/// Chooses the switch layer nearest to `fraction * steps` such that the
/// control phase has an even number of at least `TimeGrid::MIN_STEPS` steps.
pub fn switch_layer(steps: usize, fraction: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("T0 fraction must lie in [0, 1), got {fraction}")));
    }
    if steps < TimeGrid::MIN_STEPS || steps % 2 != 0 {
        return Err(Error::invalid("two-phase runs need an even number of at least 16 steps"));
    }
    let max_switch = steps - TimeGrid::MIN_STEPS;
    let mut k0 = ((fraction * steps as f64).round() as usize).min(max_switch);
    if k0 % 2 != 0 {
        k0 -= 1;
    }
    Ok(k0)
}

pub fn two_phase_run(
    problem: &FixedPointProblem,
    fraction: f64,
    ladder: &QiLadder,
    zetas: Option<Zetas>,
    settings: PicardSettings,
) -> Result<TwoPhasePlan> {
    let full = problem.time;
    let k0 = switch_layer(full.steps, fraction)?;
    let grid = problem.grid().clone();
    let free = solve_uncontrolled(&problem.model, &problem.y0, &problem.f, full)?.state;
    let t0 = full.time(k0);
    let phase_time = TimeGrid::new(full.horizon - t0, full.steps - k0)?;
    let mut second = problem.clone();
    second.time = phase_time;
    second.y0 = free.snapshot(k0);
    let control_phase = picard_run(&second, ladder, zetas, settings)?;

    let mut y = SpaceTimeField::zeros(grid.clone(), full);
    let mut u = SpaceTimeField::zeros(grid, full);
    for k in 0..=k0 {
        y.layer_mut(k).copy_from_slice(free.layer(k));
    }
    for k in 1..=phase_time.steps {
        y.layer_mut(k0 + k).copy_from_slice(control_phase.y.state.layer(k));
        u.layer_mut(k0 + k).copy_from_slice(control_phase.u.layer(k));
    }
    Ok(TwoPhasePlan {
        switch_time: t0,
        switch_layer: k0,
        free_phase: free,
        control_phase,
        y,
        u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{construct_psi, SpatialDomain};
    use crate::nonlinearity::{manufactured_forcing, ModelSpec};
    use std::f64::consts::PI;

    fn problem(nodes: usize, steps: usize, horizon: f64, s: f64, model: NonlinearityModel, amplitude: f64) -> FixedPointProblem {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap());
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let params = CarlemanParameters::new(1.0, s, horizon, psi.sup_norm(), false).unwrap();
        let y_s = ScalarField::from_fn(grid.clone(), |x| 0.2 * (PI * x[0]).sin());
        let f = manufactured_forcing(&model, &y_s);
        let y0 = ScalarField::from_fn(grid.clone(), |x| 0.2 * (PI * x[0]).sin() + amplitude * (PI * x[0]).sin());
        FixedPointProblem {
            model,
            region,
            psi,
            params,
            y0,
            f,
            y_s,
            time: TimeGrid::new(horizon, steps).unwrap(),
        }
    }

    fn cubic() -> NonlinearityModel {
        NonlinearityModel::new(ModelSpec::Cubic { beta: 1.0 }, (-10.0, 10.0)).unwrap()
    }

    fn ladder() -> QiLadder {
        QiLadder::new(2, 4.0).unwrap()
    }

    #[test]
    fn ladder_examples() {
        let l = QiLadder::new(3, 10.0).unwrap();
        assert_eq!(l.count(), 3);
        assert_eq!(l.values(), &[2.0, 2.0, 6.0, 10.0]);
        let l = QiLadder::new(2, 4.0).unwrap();
        assert_eq!(l.count(), 1);
        assert_eq!(l.values(), &[2.0, 4.0]);
        let l = QiLadder::new(4, 5.0).unwrap();
        assert_eq!(l.values(), &[2.0, 2.0, 4.0, 5.0]);
        assert_eq!(l.space_exponent(0), 2.0);
        assert_eq!(l.space_exponent(3), 5.0);
    }

    #[test]
    fn ladder_rejects_bad_exponents() {
        assert!(matches!(QiLadder::new(1, 4.0), Err(Error::BadExponents { .. })));
        assert!(matches!(QiLadder::new(3, 3.0), Err(Error::BadExponents { .. })));
        assert!(matches!(QiLadder::new(2, f64::INFINITY), Err(Error::BadExponents { .. })));
    }

    proptest::proptest! {
        #[test]
        fn ladder_structure(n in 3usize..8, extra in 0.01f64..40.0) {
            let q = n as f64 + extra;
            let l = QiLadder::new(n, q).unwrap();
            let v = l.values();
            proptest::prop_assert_eq!(v[0], 2.0);
            proptest::prop_assert_eq!(*v.last().unwrap(), q);
            let nn = n as f64;
            let expected = ((q.ln() - 2f64.ln()) / (nn.ln() - (nn - 2.0).ln())).ceil() as usize + 1;
            proptest::prop_assert!(l.count() == expected || l.count() + 1 == expected || l.count() == expected + 1);
            // the rung before the last stays below q
            proptest::prop_assert!(v[l.count() - 1] < q);
        }
    }

    fn weights_for(pb: &FixedPointProblem) -> (CarlemanParameters, WeightFields) {
        pb.weights().unwrap()
    }

    #[test]
    fn membership_vanishes_on_exact_tracking() {
        let pb = problem(33, 32, 0.1, 2e-4, cubic(), 0.05);
        let (params, weights) = weights_for(&pb);
        let big_y = solve_uncontrolled(&pb.model, &pb.y0, &pb.f, pb.time).unwrap().state;
        let mut y = big_y.clone();
        for k in 17..=32 {
            y.layer_mut(k).copy_from_slice(pb.y_s.values());
        }
        let v = membership_values(&y, &big_y, &pb.y_s, &weights, &params, &ladder()).unwrap();
        assert!(v.ladder_totals().iter().all(|x| *x == 0.0), "{v:?}");
        let zero = Zetas {
            ladder: vec![0.0; 2],
            zeta: v.time_derivative.max(v.gradient),
        };
        assert!(check_membership(&y, &big_y, &pb.y_s, &weights, &params, &ladder(), &zero).unwrap().pass);
        y.layer_mut(3)[10] += 1e-9;
        assert!(!check_membership(&y, &big_y, &pb.y_s, &weights, &params, &ladder(), &zero).unwrap().pass);
    }

    #[test]
    fn second_half_norm_matches_direct_quadrature() {
        let pb = problem(33, 32, 0.1, 2e-4, cubic(), 0.05);
        let (params, weights) = weights_for(&pb);
        let big_y = solve_uncontrolled(&pb.model, &pb.y0, &pb.f, pb.time).unwrap().state;
        let v = membership_values(&big_y, &big_y, &pb.y_s, &weights, &params, &ladder()).unwrap();
        assert!(v.first_half.iter().all(|x| *x == 0.0));
        let h = 1.0 / 32.0;
        let dt = pb.time.dt();
        for (i, (qt, qs)) in [(2.0f64, 4.0f64), (4.0, 4.0)].into_iter().enumerate() {
            let mut total = 0.0;
            for j in 16..32 {
                let mut space = 0.0;
                for n in 1..32 {
                    let t = (j as f64 + 0.5) * dt;
                    let x = n as f64 * h;
                    let psi = (PI * x).sin();
                    let phi = psi.exp() / (t * (0.1 - t));
                    let alpha = (psi.exp() - (2.0f64).exp()) / (t * (0.1 - t));
                    let e = big_y.layer(j + 1)[n] - pb.y_s.values()[n];
                    space += h * ((-2e-4 * alpha).exp() * phi.powi(-(i as i32)) * e).abs().powf(qs);
                }
                total += dt * space.powf(qt / qs);
            }
            let oracle = total.powf(1.0 / qt);
            assert!((v.second_half[i] - oracle).abs() <= 1e-8 * oracle, "{} vs {oracle}", v.second_half[i]);
        }
    }

    #[test]
    fn linear_model_needs_one_outer_iteration() {
        let pb = problem(33, 64, 0.1, 2e-4, NonlinearityModel::linear(1.0).unwrap(), 1e-2);
        let st = picard_run(&pb, &ladder(), None, PicardSettings::default()).unwrap();
        assert!(st.converged);
        assert_eq!(st.iteration, 1);
        let cert = certify(&pb, &st, 1e-8).unwrap();
        assert!(cert.pass, "{cert:?}");
    }

    #[test]
    fn stationary_data_converges_immediately() {
        let pb = problem(33, 32, 0.1, 2e-4, cubic(), 0.0);
        let st = picard_run(&pb, &ladder(), None, PicardSettings::default()).unwrap();
        assert!(st.converged);
        assert_eq!(st.iteration, 0);
        assert_eq!(st.u.sup_norm(), 0.0);
        let plan = two_phase_run(&pb, 0.25, &ladder(), None, PicardSettings::default()).unwrap();
        assert_eq!(plan.u.sup_norm(), 0.0);
        assert!(plan.y.minus_stationary(&pb.y_s).sup_norm() < 1e-12);
    }

    #[test]
    fn cubic_problem_reaches_target() {
        let pb = problem(33, 64, 0.1, 1e-4, cubic(), 1e-2);
        let st = picard_run(&pb, &ladder(), None, PicardSettings::default()).unwrap();
        assert!(st.converged);
        let d: Vec<f64> = st.trace.iter().map(|r| r.sup_distance).collect();
        assert!(d[1] < d[0] && d[2] < d[1], "{d:?}");
        let cert = certify(&pb, &st, 1e-8).unwrap();
        assert!(cert.pass, "{cert:?}");
        let initial = crate::discretization::lq_norm(&pb.y0.zip_map(&pb.y_s, |a, b| a - b), 2.0).unwrap();
        assert!(cert.terminal_error <= 1e-5 * initial, "{} vs {initial}", cert.terminal_error);
        let mut csv = Vec::new();
        st.write_trace_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,sup_distance,functional,terminal_error,cg_iterations,first_half_0,second_half_0"));
        assert_eq!(text.lines().count(), st.trace.len() + 1);
    }

    #[test]
    fn control_depends_continuously_on_initial_data() {
        let pb = problem(33, 64, 0.1, 1e-4, cubic(), 1e-2);
        let mut moved = pb.clone();
        let bump = ScalarField::from_fn(pb.grid().clone(), |x| 1e-6 * (3.0 * PI * x[0]).sin());
        moved.y0 = pb.y0.zip_map(&bump, |a, b| a + b);
        // at the default CG tolerance the solver error in u exceeds the perturbation response
        let tight = PicardSettings {
            cg_tol: 1e-12,
            ..PicardSettings::default()
        };
        let a = picard_run(&pb, &ladder(), None, tight).unwrap();
        let b = picard_run(&moved, &ladder(), None, tight).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.u.sup_distance(&b.u) <= 1e-3, "{}", a.u.sup_distance(&b.u));
    }

    #[test]
    fn switch_layer_keeps_an_even_control_phase() {
        assert_eq!(switch_layer(64, 0.0).unwrap(), 0);
        for (steps, frac) in [(64, 0.25), (80, 0.2), (64, 0.9), (40, 0.33)] {
            let k0 = switch_layer(steps, frac).unwrap();
            assert_eq!((steps - k0) % 2, 0);
            assert!(steps - k0 >= TimeGrid::MIN_STEPS);
        }
        assert!(switch_layer(64, 1.0).is_err());
        assert!(switch_layer(63, 0.5).is_err());
    }

    #[test]
    fn two_phase_without_free_phase_is_a_plain_run() {
        let pb = problem(33, 64, 0.1, 1e-4, cubic(), 1e-2);
        let direct = picard_run(&pb, &ladder(), None, PicardSettings::default()).unwrap();
        let plan = two_phase_run(&pb, 0.0, &ladder(), None, PicardSettings::default()).unwrap();
        assert_eq!(plan.switch_layer, 0);
        assert!(plan.u.sup_distance(&direct.u) == 0.0);
        assert!(plan.y.sup_distance(&direct.y.state) == 0.0);
    }

    #[test]
    fn two_phase_run_controls_only_the_second_phase() {
        let pb = problem(33, 80, 0.1, 1.5e-4, cubic(), 1e-2);
        let plan = two_phase_run(&pb, 0.2, &ladder(), None, PicardSettings::default()).unwrap();
        assert_eq!(plan.switch_layer, 16);
        for k in 0..=16 {
            assert!(plan.u.layer(k).iter().all(|v| *v == 0.0));
            assert_eq!(plan.y.layer(k), plan.free_phase.layer(k));
        }
        assert!(plan.control_phase.converged);
        let resim = solve_quasilinear_controlled(&pb.model, &plan.u, &pb.y0, &pb.f, pb.time, &pb.region).unwrap();
        assert!(resim.state.sup_distance(&plan.y) <= 1e-7);
        let err = terminal_error(&resim.state, &pb.y_s).unwrap();
        let initial = crate::discretization::lq_norm(&pb.y0.zip_map(&pb.y_s, |a, b| a - b), 2.0).unwrap();
        assert!(err <= 1e-5 * initial, "{err} vs {initial}");
    }
}
