//! Sampled checks of the weighted inequalities, the smoothing scan and the
//! estimate report of a controlled run.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretization::{gradient_magnitude, gradient_sup_norm, lq_norm_values, Grid, ScalarField, SpaceTimeField, TimeGrid};
use crate::error::{Error, Result};
use crate::geometry::{CarlemanParameters, ControlRegion, WeightFields};
use crate::nonlinearity::{quasilinear_laplacian, NonlinearityModel};
use crate::solvers::{solve_uncontrolled, EnergyAudit, StepOperators};

/// Number of sine modes per axis in random samples.
const MODES: usize = 6;

/// `|b_t|_{L^inf(L^n)} + |grad b|_{L^inf}` from discrete differences.
pub fn coefficient_zeta(b: &SpaceTimeField) -> Result<f64> {
    let grid = b.grid();
    let time = b.time();
    let dt = time.dt();
    let n = grid.dims() as f64;
    let mut rate: f64 = 0.0;
    let mut grad: f64 = 0.0;
    for k in 0..time.layers() {
        grad = grad.max(gradient_sup_norm(grid, b.layer(k)));
        if k < time.steps {
            let d: Vec<f64> = b.layer(k + 1).iter().zip(b.layer(k)).map(|(a, c)| (a - c) / dt).collect();
            rate = rate.max(lq_norm_values(grid, &d, n)?);
        }
    }
    Ok(rate + grad)
}

/// Smooth random field `sum c_k prod_a sin(k_a pi x_a) / |k|^2` vanishing on the boundary.
fn random_profile(grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dims = grid.dims();
    let mut terms = Vec::new();
    let mut index = vec![1usize; dims];
    loop {
        let norm2: usize = index.iter().map(|k| k * k).sum();
        terms.push((index.clone(), rng.gen_range(-1.0..1.0) / norm2 as f64));
        let mut axis = 0;
        loop {
            if axis == dims {
                return evaluate_profile(grid, &terms);
            }
            index[axis] += 1;
            if index[axis] <= MODES {
                break;
            }
            index[axis] = 1;
            axis += 1;
        }
    }
}

fn evaluate_profile(grid: &Grid, terms: &[(Vec<usize>, f64)]) -> Vec<f64> {
    (0..grid.node_count())
        .map(|n| {
            if grid.is_boundary(n) {
                return 0.0;
            }
            let x = grid.coords(n);
            let bounds = grid.domain().bounds();
            terms
                .iter()
                .map(|(k, c)| {
                    c * k
                        .iter()
                        .enumerate()
                        .map(|(a, ka)| {
                            let (lo, hi) = bounds[a];
                            (*ka as f64 * PI * (x[a] - lo) / (hi - lo)).sin()
                        })
                        .product::<f64>()
                })
                .sum()
        })
        .collect()
}

/// A random adjoint sample: terminal value and source.
#[derive(Debug, Clone)]
pub struct AdjointSample {
    pub p_t: ScalarField,
    pub g: Option<SpaceTimeField>,
}

/// Sample `index` of the family seeded by `seed`; the draw does not depend on
/// the grid resolution beyond evaluating the same series on its nodes.
pub fn random_sample(grid: &Arc<Grid>, time: TimeGrid, seed: u64, index: usize, with_source: bool) -> AdjointSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64));
    let p_t = ScalarField::new(grid.clone(), random_profile(grid, &mut rng)).expect("matching length");
    let g = if with_source {
        let space = random_profile(grid, &mut rng);
        let temporal: Vec<f64> = (0..3).map(|m| rng.gen_range(-1.0..1.0) / (1.0 + m as f64).powi(2)).collect();
        let horizon = time.horizon;
        let mut g = SpaceTimeField::zeros(grid.clone(), time);
        for k in 0..time.layers() {
            let t = time.time(k);
            let amp: f64 = temporal.iter().enumerate().map(|(m, c)| c * (m as f64 * PI * t / horizon).cos()).sum();
            for (slot, v) in g.layer_mut(k).iter_mut().zip(&space) {
                *slot = amp * v;
            }
        }
        Some(g)
    } else {
        None
    };
    AdjointSample { p_t, g }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanReport {
    pub sample: usize,
    /// `int e^{2 s alpha} (s^3 l^3 phi^3 p^2 + s l phi |grad p|^2)` over `Q`.
    pub lhs: f64,
    /// `int e^{2 s alpha} s^3 l^3 phi^3 p^2` over `omega x (0, T)`.
    pub rhs_control: f64,
    /// `int e^{2 s alpha} g^2` over `Q`.
    pub rhs_source: f64,
    pub zeta: f64,
    /// `lhs / (rhs_control (1 + zeta) + rhs_source)`, zero for degenerate samples.
    pub empirical_c: f64,
    pub degenerate: bool,
}

fn midpoint(p: &SpaceTimeField, j: usize) -> Vec<f64> {
    p.layer(j).iter().zip(p.layer(j + 1)).map(|(a, b)| 0.5 * (a + b)).collect()
}

/// Evaluates both sides of the weighted inequality for one adjoint sample.
pub fn carleman_sample(
    ops: &StepOperators,
    sample: &AdjointSample,
    params: &CarlemanParameters,
    weights: &WeightFields,
    region: &ControlRegion,
    zeta: f64,
    index: usize,
) -> Result<(CarlemanReport, EnergyAudit)> {
    let (p, energy) = ops.adjoint(sample.p_t.values(), sample.g.as_ref())?;
    let grid = ops.grid();
    let time = ops.time();
    let dt = time.dt();
    let quad = grid.quadrature_weights();
    let mask = region.indicator();
    let (s, l) = (params.s, params.lambda);
    let (mut lhs, mut control, mut source) = (0.0, 0.0, 0.0);
    for j in 0..time.steps {
        let pm = midpoint(&p, j);
        let grad = gradient_magnitude(grid, &pm);
        let gm = sample.g.as_ref().map(|g| midpoint(g, j));
        for n in 0..grid.node_count() {
            let w = weights.exp_weight(2.0 * s, j, n) * quad[n] * dt;
            if w == 0.0 {
                continue;
            }
            let phi = weights.phi(j, n);
            let bulk = (s * l * phi).powi(3) * pm[n] * pm[n];
            lhs += w * (bulk + s * l * phi * grad[n] * grad[n]);
            control += w * mask[n] * bulk;
            if let Some(g) = &gm {
                source += w * g[n] * g[n];
            }
        }
    }
    let denominator = control * (1.0 + zeta) + source;
    let degenerate = lhs == 0.0 || denominator == 0.0;
    Ok((
        CarlemanReport {
            sample: index,
            lhs,
            rhs_control: control,
            rhs_source: source,
            zeta,
            empirical_c: if degenerate { 0.0 } else { lhs / denominator },
            degenerate,
        },
        energy,
    ))
}

/// Samples with the same seed agree across resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanSummary {
    pub reports: Vec<CarlemanReport>,
    pub max_c: f64,
    pub energy: EnergyAudit,
}

/// Random `(g, p_T)` samples for the adjoint with coefficient `b` (harmonic faces).
pub fn carleman_check(
    b: &SpaceTimeField,
    samples: usize,
    params: &CarlemanParameters,
    weights: &WeightFields,
    region: &ControlRegion,
    seed: u64,
) -> Result<CarlemanSummary> {
    let ops = StepOperators::from_nodal(b)?;
    let zeta = coefficient_zeta(b)?;
    let mut reports = Vec::with_capacity(samples);
    let mut energy = EnergyAudit::clean();
    for i in 0..samples {
        let sample = random_sample(b.grid(), b.time(), seed, i, true);
        let (report, audit) = carleman_sample(&ops, &sample, params, weights, region, zeta, i)?;
        energy.merge(&audit);
        reports.push(report);
    }
    Ok(CarlemanSummary {
        max_c: reports.iter().map(|r| r.empirical_c).fold(0.0, f64::max),
        reports,
        energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub sample: usize,
    /// `|p(0)|_2^2`.
    pub initial_energy: f64,
    /// `int_0^{T/2} |p|_2^2`.
    pub early_energy: f64,
    /// `int e^{2 s alpha} phi^3 p^2` over `omega x (0, T)`.
    pub observed: f64,
    pub zeta: f64,
    /// `initial_energy / ((1 + zeta) observed)`.
    pub initial_constant: f64,
    /// `early_energy / ((1 + zeta) observed)`.
    pub early_constant: f64,
    pub degenerate: bool,
}

pub fn observability_sample(
    ops: &StepOperators,
    p_t: &ScalarField,
    weights: &WeightFields,
    region: &ControlRegion,
    s: f64,
    zeta: f64,
    index: usize,
) -> Result<(ObservabilityReport, EnergyAudit)> {
    let (p, energy) = ops.adjoint(p_t.values(), None)?;
    let grid = ops.grid();
    let time = ops.time();
    let dt = time.dt();
    let quad = grid.quadrature_weights();
    let mask = region.indicator();
    let initial_energy: f64 = p.layer(0).iter().zip(&quad).map(|(v, w)| w * v * v).sum();
    let (mut early, mut observed) = (0.0, 0.0);
    for j in 0..time.steps {
        let pm = midpoint(&p, j);
        for n in 0..grid.node_count() {
            let v2 = pm[n] * pm[n] * quad[n] * dt;
            if j < time.steps / 2 {
                early += v2;
            }
            if mask[n] > 0.0 && v2 > 0.0 {
                observed += weights.exp_weight(2.0 * s, j, n) * weights.phi(j, n).powi(3) * v2;
            }
        }
    }
    let degenerate = observed == 0.0;
    let scale = (1.0 + zeta) * observed;
    Ok((
        ObservabilityReport {
            sample: index,
            initial_energy,
            early_energy: early,
            observed,
            zeta,
            initial_constant: if degenerate { 0.0 } else { initial_energy / scale },
            early_constant: if degenerate { 0.0 } else { early / scale },
            degenerate,
        },
        energy,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilitySummary {
    pub reports: Vec<ObservabilityReport>,
    pub max_initial_constant: f64,
    pub max_early_constant: f64,
    pub energy: EnergyAudit,
}

/// Source-free adjoint samples: constants of the initial-value and early-time
/// observability inequalities.
pub fn observability_check(
    b: &SpaceTimeField,
    samples: usize,
    params: &CarlemanParameters,
    weights: &WeightFields,
    region: &ControlRegion,
    seed: u64,
) -> Result<ObservabilitySummary> {
    let ops = StepOperators::from_nodal(b)?;
    let zeta = coefficient_zeta(b)?;
    let mut reports = Vec::with_capacity(samples);
    let mut energy = EnergyAudit::clean();
    for i in 0..samples {
        let sample = random_sample(b.grid(), b.time(), seed, i, false);
        let (report, audit) = observability_sample(&ops, &sample.p_t, weights, region, params.s, zeta, i)?;
        energy.merge(&audit);
        reports.push(report);
    }
    Ok(ObservabilitySummary {
        max_initial_constant: reports.iter().map(|r| r.initial_constant).fold(0.0, f64::max),
        max_early_constant: reports.iter().map(|r| r.early_constant).fold(0.0, f64::max),
        reports,
        energy,
    })
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_constant: f64,
    pub points: usize,
}

/// Fits `y = C x^e` over the pairs with finite positive entries.
pub fn power_law_fit(x: &[f64], y: &[f64]) -> Result<PowerLawFit> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::FitDegenerate(format!("{} valid points, need 3", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 1e-24 {
        return Err(Error::FitDegenerate("all abscissae coincide".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let exponent = sxy / sxx;
    Ok(PowerLawFit {
        exponent,
        log_constant: my - exponent * mx,
        points: pts.len(),
    })
}

/// How the initial data of the smoothing scan depend on the size parameter `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingFamily {
    /// `y0 = y_s + r * profile`.
    Scaled { profile: Vec<f64> },
    /// `y0 = y_s + height * cos^2(pi (x - c) / (2 r))` on `|x - c| < r` (first axis), zero elsewhere.
    Concentrating { height: f64, center: f64 },
}

impl SmoothingFamily {
    pub fn perturbation(&self, grid: &Grid, r: f64) -> Result<Vec<f64>> {
        match self {
            SmoothingFamily::Scaled { profile } => {
                if profile.len() != grid.node_count() {
                    return Err(Error::invalid("profile length does not match the grid"));
                }
                Ok(profile.iter().map(|v| r * v).collect())
            }
            SmoothingFamily::Concentrating { height, center } => Ok((0..grid.node_count())
                .map(|n| {
                    if grid.is_boundary(n) {
                        return 0.0;
                    }
                    let d = grid.coord(n, 0) - center;
                    if d.abs() < r {
                        height * (PI * d / (2.0 * r)).cos().powi(2)
                    } else {
                        0.0
                    }
                })
                .collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPoint {
    pub size: f64,
    /// `|y0 - y_s|_2`.
    pub data_norm: f64,
    /// `max_k t_k |(Y^k - Y^{k-1}) / dt|_q`.
    pub measure: f64,
    /// `|Delta a(Y(T)) + f|_q`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingScan {
    pub q: f64,
    pub points: Vec<SmoothingPoint>,
    pub fit: PowerLawFit,
    pub residual_fit: Option<PowerLawFit>,
}

/// Uncontrolled runs from `y_s + perturbation(r)` for each size, fitted on a log-log scale.
pub fn smoothing_scan(
    model: &NonlinearityModel,
    y_s: &ScalarField,
    f: &ScalarField,
    family: &SmoothingFamily,
    sizes: &[f64],
    time: TimeGrid,
    q: f64,
) -> Result<SmoothingScan> {
    if sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("data sizes must be strictly decreasing"));
    }
    let grid = y_s.grid();
    let dt = time.dt();
    let mut points = Vec::with_capacity(sizes.len());
    for &r in sizes {
        let dy = family.perturbation(grid, r)?;
        let y0 = ScalarField::new(grid.clone(), y_s.values().iter().zip(&dy).map(|(a, b)| a + b).collect())?;
        let data_norm = lq_norm_values(grid, &dy, 2.0)?;
        let traj = solve_uncontrolled(model, &y0, f, time)?.state;
        let mut measure: f64 = 0.0;
        for k in 1..time.layers() {
            let rate: Vec<f64> = traj.layer(k).iter().zip(traj.layer(k - 1)).map(|(a, b)| (a - b) / dt).collect();
            measure = measure.max(time.time(k) * lq_norm_values(grid, &rate, q)?);
        }
        let lap = quasilinear_laplacian(model, &traj.last());
        let res: Vec<f64> = lap.values().iter().zip(f.values()).map(|(a, b)| a + b).collect();
        let interior: Vec<f64> = res
            .iter()
            .enumerate()
            .map(|(n, v)| if grid.is_boundary(n) { 0.0 } else { *v })
            .collect();
        points.push(SmoothingPoint {
            size: r,
            data_norm,
            measure,
            residual: lq_norm_values(grid, &interior, q)?,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.data_norm).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.measure).collect();
    let rs: Vec<f64> = points.iter().map(|p| p.residual).collect();
    Ok(SmoothingScan {
        q,
        fit: power_law_fit(&xs, &ys)?,
        residual_fit: power_law_fit(&xs, &rs).ok(),
        points,
    })
}

/// Left-hand sides of the main estimates on a computed trajectory, with the
/// data norms that drive them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// `|e^{-s alpha_0} u|_{L^inf(Q)}`.
    pub control_norm: f64,
    /// `sup_t |t (y - y_s)|_q + sup_t |d_t (t (y - y_s))|_q + sup_t |t grad(y - y_s)|_inf`.
    pub regularity_norm: f64,
    /// `sup_{t >= T/2} |e^{-s alpha_0} (y - y_s)|_q`.
    pub terminal_weighted_norm: f64,
    /// `|y - y_s|_{L^inf(Q)}`.
    pub sup_deviation: f64,
    pub data_l2: f64,
    pub data_sup: f64,
    pub data_lq: f64,
    /// `|y0 - y_s|_2^{2/q}`.
    pub driver: f64,
    pub q: f64,
}

/// Cells are sampled at their right layer with the midpoint weight.
pub fn theorem_estimates(
    y: &SpaceTimeField,
    u: &SpaceTimeField,
    y_s: &ScalarField,
    weights: &WeightFields,
    params: &CarlemanParameters,
    q: f64,
) -> Result<EstimateReport> {
    let time = y.time();
    if u.time() != time || weights.time_count() != time.steps {
        return Err(Error::invalid("estimate inputs do not share the time grid"));
    }
    let grid = y.grid();
    let dt = time.dt();
    let s = params.s;
    let dev = y.minus_stationary(y_s);
    let growth = |j: usize| crate::geometry::exp_clamped(-s * weights.alpha0(j));
    let mut control_norm: f64 = 0.0;
    let mut terminal: f64 = 0.0;
    for j in 0..time.steps {
        let w = growth(j);
        let um = u.layer(j + 1).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if um > 0.0 {
            control_norm = control_norm.max(w * um);
        }
        if j >= time.steps / 2 {
            let scaled: Vec<f64> = dev.layer(j + 1).iter().map(|v| if *v == 0.0 { 0.0 } else { w * v }).collect();
            terminal = terminal.max(lq_norm_values(grid, &scaled, q)?);
        }
    }
    let (mut value, mut rate, mut grad): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for k in 0..time.layers() {
        let t = time.time(k);
        let layer = dev.layer(k);
        let tv: Vec<f64> = layer.iter().map(|v| t * v).collect();
        value = value.max(lq_norm_values(grid, &tv, q)?);
        grad = grad.max(t * gradient_sup_norm(grid, layer));
        if k > 0 {
            let t_prev = time.time(k - 1);
            let d: Vec<f64> = layer
                .iter()
                .zip(dev.layer(k - 1))
                .map(|(a, b)| (t * a - t_prev * b) / dt)
                .collect();
            rate = rate.max(lq_norm_values(grid, &d, q)?);
        }
    }
    let data = dev.layer(0);
    let data_l2 = lq_norm_values(grid, data, 2.0)?;
    Ok(EstimateReport {
        control_norm,
        regularity_norm: value + rate + grad,
        terminal_weighted_norm: terminal,
        sup_deviation: dev.sup_norm(),
        data_l2,
        data_sup: data.iter().fold(0.0, |m, v| m.max(v.abs())),
        data_lq: lq_norm_values(grid, data, q)?,
        driver: data_l2.powf(2.0 / q),
        q,
    })
}

/// Smallest `C` with `sup_deviation <= C (driver + data_sup)` over a sweep.
pub fn sup_envelope_constant(reports: &[EstimateReport]) -> f64 {
    reports
        .iter()
        .filter(|r| r.driver + r.data_sup > 0.0)
        .map(|r| r.sup_deviation / (r.driver + r.data_sup))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{construct_psi, SpatialDomain};

    fn setting(nodes: usize, steps: usize, horizon: f64, s: f64) -> (SpaceTimeField, CarlemanParameters, WeightFields, ControlRegion) {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap());
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let tg = TimeGrid::new(horizon, steps).unwrap();
        let params = CarlemanParameters::new(1.0, s, horizon, psi.sup_norm(), false).unwrap();
        let weights = WeightFields::for_time_grid(&psi, &params, &tg).unwrap();
        let one = ScalarField::new(grid.clone(), vec![1.0; grid.node_count()]).unwrap();
        (SpaceTimeField::constant(&one, tg), params, weights, region)
    }

    #[test]
    fn constant_coefficient_has_zero_zeta() {
        let (b, ..) = setting(17, 16, 0.1, 1e-3);
        assert_eq!(coefficient_zeta(&b).unwrap(), 0.0);
    }

    #[test]
    fn linear_coefficient_zeta_is_its_slope() {
        let (b, ..) = setting(17, 16, 0.1, 1e-3);
        let ramp = ScalarField::from_fn(b.grid().clone(), |x| 1.0 + 0.5 * x[0]);
        let zeta = coefficient_zeta(&SpaceTimeField::constant(&ramp, b.time())).unwrap();
        assert!((zeta - 0.5).abs() < 1e-12, "{zeta}");
    }

    #[test]
    fn zero_sample_is_degenerate() {
        let (b, params, weights, region) = setting(33, 32, 0.1, 1e-3);
        let ops = StepOperators::from_nodal(&b).unwrap();
        let sample = AdjointSample { p_t: ScalarField::zeros(b.grid().clone()), g: None };
        let (report, _) = carleman_sample(&ops, &sample, &params, &weights, &region, 0.0, 0).unwrap();
        assert_eq!(report.lhs, 0.0);
        assert_eq!(report.rhs_control + report.rhs_source, 0.0);
        assert!(report.degenerate);
        assert_eq!(report.empirical_c, 0.0);
        let (obs, _) = observability_sample(&ops, &sample.p_t, &weights, &region, params.s, 0.0, 0).unwrap();
        assert_eq!(obs.initial_energy, 0.0);
        assert!(obs.degenerate);
    }

    #[test]
    fn heat_mode_initial_energy_matches_closed_form() {
        let horizon = 0.1;
        let (b, params, weights, region) = setting(65, 128, horizon, 1e-3);
        let ops = StepOperators::from_nodal(&b).unwrap();
        let p_t = ScalarField::from_fn(b.grid().clone(), |x| (PI * x[0]).sin());
        let (obs, audit) = observability_sample(&ops, &p_t, &weights, &region, params.s, 0.0, 0).unwrap();
        let exact = 0.5 * (-2.0 * PI * PI * horizon).exp();
        assert!((obs.initial_energy / exact - 1.0).abs() < 0.02, "{} vs {exact}", obs.initial_energy);
        let early_exact = 0.25 / (PI * PI) * ((-PI * PI * horizon).exp() - (-2.0 * PI * PI * horizon).exp());
        assert!((obs.early_energy / early_exact - 1.0).abs() < 0.02, "{} vs {early_exact}", obs.early_energy);
        assert!(audit.passed());
    }

    #[test]
    fn random_samples_are_reproducible_and_vanish_on_boundary() {
        let (b, ..) = setting(33, 16, 0.1, 1e-3);
        let a = random_sample(b.grid(), b.time(), 7, 3, true);
        let c = random_sample(b.grid(), b.time(), 7, 3, true);
        let d = random_sample(b.grid(), b.time(), 7, 4, true);
        assert_eq!(a.p_t.values(), c.p_t.values());
        assert_ne!(a.p_t.values(), d.p_t.values());
        let n = b.grid().node_count();
        assert_eq!(a.p_t.values()[0], 0.0);
        assert_eq!(a.p_t.values()[n - 1], 0.0);
        assert!(a.g.is_some());
    }

    #[test]
    fn carleman_constants_are_finite_and_stable_under_refinement() {
        let coarse = {
            let (b, params, weights, region) = setting(33, 64, 0.1, 2e-4);
            carleman_check(&b, 8, &params, &weights, &region, 11).unwrap()
        };
        let fine = {
            let (b, params, weights, region) = setting(65, 128, 0.1, 2e-4);
            carleman_check(&b, 8, &params, &weights, &region, 11).unwrap()
        };
        assert!(coarse.max_c.is_finite() && coarse.max_c > 0.0);
        assert!((fine.max_c / coarse.max_c - 1.0).abs() < 0.2, "{} vs {}", coarse.max_c, fine.max_c);
        assert!(coarse.energy.passed() && fine.energy.passed());
        for r in &coarse.reports {
            assert!(r.lhs > 0.0 && !r.degenerate);
        }
    }

    #[test]
    fn power_law_fit_recovers_exact_exponent() {
        let x = [1e-1, 5e-2, 2e-2, 1e-2];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.7)).collect();
        let fit = power_law_fit(&x, &y).unwrap();
        assert!((fit.exponent - 0.7).abs() < 1e-12);
        assert!((fit.log_constant - 3f64.ln()).abs() < 1e-12);
        assert_eq!(fit.points, 4);
    }

    #[test]
    fn power_law_fit_needs_three_positive_points() {
        let err = power_law_fit(&[1.0, 0.5, 0.25], &[1.0, 0.0, 0.5]).unwrap_err();
        assert!(matches!(err, Error::FitDegenerate(_)));
        assert!(matches!(power_law_fit(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::FitDegenerate(_))));
    }

    fn linear_steady(nodes: usize) -> (NonlinearityModel, ScalarField, ScalarField) {
        let grid = Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap());
        let model = NonlinearityModel::linear(1.0).unwrap();
        let ys = ScalarField::from_fn(grid, |x| 0.2 * (PI * x[0]).sin());
        let f = crate::nonlinearity::manufactured_forcing(&model, &ys);
        (model, ys, f)
    }

    #[test]
    fn scaled_family_is_linear_for_linear_model() {
        let (model, ys, f) = linear_steady(65);
        let profile = ScalarField::from_fn(ys.grid().clone(), |x| (x[0] * (1.0 - x[0])).powf(0.3)).values().to_vec();
        let family = SmoothingFamily::Scaled { profile };
        let scan = smoothing_scan(&model, &ys, &f, &family, &[1e-1, 1e-2, 1e-3], TimeGrid::new(0.05, 64).unwrap(), 4.0).unwrap();
        assert!((scan.fit.exponent - 1.0).abs() < 1e-6, "{}", scan.fit.exponent);
        assert_eq!(scan.points.len(), 3);
    }

    #[test]
    fn stationary_data_give_degenerate_scan() {
        let (model, ys, f) = linear_steady(33);
        let family = SmoothingFamily::Scaled { profile: vec![0.0; 33] };
        let err = smoothing_scan(&model, &ys, &f, &family, &[1e-1, 1e-2, 1e-3], TimeGrid::new(0.05, 16).unwrap(), 4.0).unwrap_err();
        assert!(matches!(err, Error::FitDegenerate(_)));
    }

    #[test]
    fn scan_rejects_increasing_sizes() {
        let (model, ys, f) = linear_steady(17);
        let family = SmoothingFamily::Concentrating { height: 0.05, center: 0.5 };
        assert!(smoothing_scan(&model, &ys, &f, &family, &[0.1, 0.2, 0.05], TimeGrid::new(0.05, 16).unwrap(), 4.0).is_err());
    }

    #[test]
    fn estimates_vanish_at_the_stationary_state() {
        let (b, params, weights, _) = setting(33, 32, 0.1, 1e-3);
        let (_, ys, _) = linear_steady(33);
        let y = SpaceTimeField::constant(&ys, b.time());
        let u = SpaceTimeField::zeros(b.grid().clone(), b.time());
        let report = theorem_estimates(&y, &u, &ys, &weights, &params, 4.0).unwrap();
        assert_eq!(report.control_norm, 0.0);
        assert_eq!(report.regularity_norm, 0.0);
        assert_eq!(report.terminal_weighted_norm, 0.0);
        assert_eq!(report.sup_deviation, 0.0);
        assert_eq!(report.driver, 0.0);
        assert_eq!(sup_envelope_constant(&[report]), 0.0);
    }

    #[test]
    fn sup_deviation_oracle() {
        let (b, params, weights, _) = setting(33, 16, 0.1, 1e-3);
        let (model, ys, f) = linear_steady(33);
        let y0 = ScalarField::from_fn(ys.grid().clone(), |x| 0.2 * (PI * x[0]).sin() + 0.01 * (2.0 * PI * x[0]).sin());
        let y = solve_uncontrolled(&model, &y0, &f, b.time()).unwrap().state;
        let u = SpaceTimeField::zeros(b.grid().clone(), b.time());
        let report = theorem_estimates(&y, &u, &ys, &weights, &params, 2.0).unwrap();
        let mut sup: f64 = 0.0;
        for k in 0..b.time().layers() {
            for (a, c) in y.layer(k).iter().zip(ys.values()) {
                sup = sup.max((a - c).abs());
            }
        }
        assert_eq!(report.sup_deviation, sup);
        assert!((report.data_l2 - 0.01 / 2f64.sqrt()).abs() < 1e-3 * 0.01);
        assert!((report.driver - report.data_l2).abs() < 1e-15);
        assert_eq!(report.control_norm, 0.0);
    }
}
