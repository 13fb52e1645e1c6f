//! Spatial domain, control region, the auxiliary function `psi` and the
//! Carleman weight fields built from it.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discretization::{Grid, TimeGrid};
use crate::error::{Error, Result};

/// Exponent arguments are clamped to `[-CLAMP, CLAMP]` before `exp`.
pub const CLAMP_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Interval,
    Rectangle,
}

/// Axis-aligned interval or rectangle with per-axis node counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDomain {
    kind: DomainKind,
    bounds: Vec<(f64, f64)>,
    resolution: Vec<usize>,
}

impl SpatialDomain {
    pub const MIN_NODES: usize = 8;

    pub fn new(kind: DomainKind, bounds: Vec<(f64, f64)>, resolution: Vec<usize>) -> Result<Self> {
        let dims = match kind {
            DomainKind::Interval => 1,
            DomainKind::Rectangle => 2,
        };
        if bounds.len() != dims || resolution.len() != dims {
            return Err(Error::invalid(format!("{kind:?} needs {dims} axes")));
        }
        for (&(lo, hi), &n) in bounds.iter().zip(&resolution) {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("axis bounds ({lo}, {hi}) must satisfy lo < hi")));
            }
            if n < Self::MIN_NODES {
                return Err(Error::invalid(format!(
                    "axis needs at least {} nodes, got {n}",
                    Self::MIN_NODES
                )));
            }
        }
        Ok(SpatialDomain {
            kind,
            bounds,
            resolution,
        })
    }

    pub fn interval(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Self::new(DomainKind::Interval, vec![(lo, hi)], vec![nodes])
    }

    pub fn rectangle(x: (f64, f64), y: (f64, f64), nodes: (usize, usize)) -> Result<Self> {
        Self::new(DomainKind::Rectangle, vec![x, y], vec![nodes.0, nodes.1])
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect()
    }
}

fn inside_open(b: &[(f64, f64)], x: &[f64]) -> bool {
    b.iter().zip(x).all(|(&(lo, hi), &c)| lo < c && c < hi)
}

/// Control set `omega` (support of the control) and the smaller `omega0`
/// carrying the critical points of `psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRegion {
    omega: Vec<(f64, f64)>,
    omega0: Vec<(f64, f64)>,
    indicator: Vec<f64>,
}

impl ControlRegion {
    pub fn new(grid: &Grid, omega: Vec<(f64, f64)>, omega0: Vec<(f64, f64)>) -> Result<Self> {
        let dims = grid.dims();
        if omega.len() != dims || omega0.len() != dims {
            return Err(Error::invalid("control boxes must match the domain dimension"));
        }
        for axis in 0..dims {
            let (dlo, dhi) = grid.domain().bounds()[axis];
            let h = grid.spacing(axis);
            let (wlo, whi) = omega[axis];
            let (zlo, zhi) = omega0[axis];
            if !(wlo < whi) || !(zlo < zhi) {
                return Err(Error::invalid("control boxes need lo < hi on every axis"));
            }
            if !(dlo < wlo && whi < dhi) || !(wlo < zlo && zhi < whi) {
                return Err(Error::invalid(
                    "need closure(omega0) inside omega and closure(omega) inside the domain",
                ));
            }
            let tol = 1e-12 * (dhi - dlo);
            if wlo - dlo < h - tol || dhi - whi < h - tol || zlo - wlo < h - tol || whi - zhi < h - tol {
                return Err(Error::GridTooCoarse(format!(
                    "strict inclusions on axis {axis} are thinner than one cell (h = {h})"
                )));
            }
        }
        let indicator: Vec<f64> = (0..grid.node_count())
            .map(|n| if inside_open(&omega, &grid.coords(n)) { 1.0 } else { 0.0 })
            .collect();
        if !indicator.iter().any(|&m| m > 0.0) {
            return Err(Error::GridTooCoarse("omega contains no grid node".into()));
        }
        Ok(ControlRegion {
            omega,
            omega0,
            indicator,
        })
    }

    pub fn omega(&self) -> &[(f64, f64)] {
        &self.omega
    }

    pub fn omega0(&self) -> &[(f64, f64)] {
        &self.omega0
    }

    /// 0/1 mask of the nodes inside `omega`.
    pub fn indicator(&self) -> &[f64] {
        &self.indicator
    }

    pub fn in_omega0(&self, x: &[f64]) -> bool {
        inside_open(&self.omega0, x)
    }

    pub fn control_nodes(&self) -> Vec<usize> {
        self.indicator
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(n, _)| n)
            .collect()
    }
}

/// Closed-form description of `psi`, kept so it can be re-evaluated on other grids.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiProfile {
    /// Product of `sin(pi (x - lo)/(hi - lo))` over the axes.
    Sine { bounds: Vec<(f64, f64)> },
    /// Two cubics joined with matching value, slope and curvature at `peak`.
    PiecewiseCubic {
        lo: f64,
        hi: f64,
        peak: f64,
        curvature: f64,
        cubic_left: f64,
        cubic_right: f64,
    },
    /// Nodal values supplied directly; gradients by finite differences.
    Tabulated,
}

impl PsiProfile {
    fn value_and_grad(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        use std::f64::consts::PI;
        match self {
            PsiProfile::Sine { bounds } => {
                let parts: Vec<(f64, f64)> = bounds
                    .iter()
                    .zip(x)
                    .map(|(&(lo, hi), &c)| {
                        let w = PI / (hi - lo);
                        let a = w * (c - lo);
                        (a.sin(), w * a.cos())
                    })
                    .collect();
                let value = parts.iter().map(|p| p.0).product();
                let grad = (0..parts.len())
                    .map(|i| {
                        parts
                            .iter()
                            .enumerate()
                            .map(|(j, p)| if i == j { p.1 } else { p.0 })
                            .product()
                    })
                    .collect();
                Some((value, grad))
            }
            PsiProfile::PiecewiseCubic {
                peak,
                curvature,
                cubic_left,
                cubic_right,
                ..
            } => {
                let (t, c, sign) = if x[0] <= *peak {
                    (peak - x[0], *cubic_left, -1.0)
                } else {
                    (x[0] - peak, *cubic_right, 1.0)
                };
                let value = 1.0 + 0.5 * curvature * t * t + c * t * t * t;
                let slope = sign * (curvature * t + 3.0 * c * t * t);
                Some((value, vec![slope]))
            }
            PsiProfile::Tabulated => None,
        }
    }

    /// Value at an arbitrary point (analytic profiles only).
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        self.value_and_grad(x).map(|v| v.0)
    }
}

/// Nodal table of `psi` with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunctionPsi {
    grid: Arc<Grid>,
    profile: PsiProfile,
    values: Vec<f64>,
    grad: Vec<Vec<f64>>,
    sup_norm: f64,
}

impl WeightFunctionPsi {
    fn tabulate(grid: Arc<Grid>, profile: PsiProfile) -> Self {
        let dims = grid.dims();
        let mut values = vec![0.0; grid.node_count()];
        let mut grad = vec![vec![0.0; grid.node_count()]; dims];
        for n in 0..grid.node_count() {
            let (v, g) = profile.value_and_grad(&grid.coords(n)).expect("analytic profile");
            values[n] = if grid.is_boundary(n) { 0.0 } else { v };
            for a in 0..dims {
                grad[a][n] = g[a];
            }
        }
        let sup_norm = values.iter().cloned().fold(0.0, f64::max);
        WeightFunctionPsi {
            grid,
            profile,
            values,
            grad,
            sup_norm,
        }
    }

    /// Wraps arbitrary nodal values; used to audit candidate functions.
    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::invalid("psi table length does not match the grid"));
        }
        let grad = crate::discretization::nodal_gradient(&grid, &values);
        let sup_norm = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(WeightFunctionPsi {
            grid,
            profile: PsiProfile::Tabulated,
            values,
            grad,
            sup_norm,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn profile(&self) -> &PsiProfile {
        &self.profile
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Gradient component `axis` at every node.
    pub fn grad(&self, axis: usize) -> &[f64] {
        &self.grad[axis]
    }

    pub fn grad_norm(&self, node: usize) -> f64 {
        self.grad.iter().map(|g| g[node] * g[node]).sum::<f64>().sqrt()
    }

    /// Re-evaluates the same analytic profile on another grid.
    pub fn on_grid(&self, grid: Arc<Grid>) -> Result<Self> {
        match self.profile {
            PsiProfile::Tabulated => Err(Error::invalid("tabulated psi cannot be re-sampled")),
            _ => Ok(Self::tabulate(grid, self.profile.clone())),
        }
    }
}

/// Builds `psi > 0` in the domain, zero on the boundary, with `|grad psi| > 0`
/// away from `omega0`.
///
/// Symmetric regions get a sine product. Off-center 1D regions get a C^2
/// piecewise cubic peaking at the middle of `omega0`.
pub fn construct_psi(grid: &Arc<Grid>, region: &ControlRegion) -> Result<WeightFunctionPsi> {
    let domain = grid.domain();
    let center = domain.center();
    if region.in_omega0(&center) {
        let profile = PsiProfile::Sine {
            bounds: domain.bounds().to_vec(),
        };
        return Ok(WeightFunctionPsi::tabulate(grid.clone(), profile));
    }
    if domain.dims() != 1 {
        return Err(Error::RegionUnsupported(
            "rectangle domains need omega0 to contain the domain center".into(),
        ));
    }
    let (lo, hi) = domain.bounds()[0];
    let (zlo, zhi) = region.omega0()[0];
    let peak = 0.5 * (zlo + zhi);
    if !(lo < peak && peak < hi) {
        return Err(Error::RegionUnsupported("omega0 midpoint is not interior".into()));
    }
    let (dl, dr) = (peak - lo, hi - peak);
    // monotone on each side iff curvature lies in (-6/d^2, 0) for both half-widths
    let curvature = -3.0 / dl.max(dr).powi(2);
    let cubic = |d: f64| -(1.0 + 0.5 * curvature * d * d) / d.powi(3);
    let profile = PsiProfile::PiecewiseCubic {
        lo,
        hi,
        peak,
        curvature,
        cubic_left: cubic(dl),
        cubic_right: cubic(dr),
    };
    let h = grid.spacing(0);
    if dl.min(dr) < h {
        return Err(Error::GridTooCoarse("psi peak is within one cell of the boundary".into()));
    }
    Ok(WeightFunctionPsi::tabulate(grid.clone(), profile))
}

/// Outcome of [`verify_psi`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiReport {
    pub min_interior_value: f64,
    pub min_grad_outside_omega0: f64,
    pub max_boundary_abs: f64,
    pub pass: bool,
}

/// Relative size below which a gradient counts as vanishing.
const GRAD_ZERO_TOL: f64 = 1e-10;

pub fn verify_psi(psi: &WeightFunctionPsi, region: &ControlRegion) -> PsiReport {
    let grid = psi.grid();
    let mut min_interior = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    let mut max_grad: f64 = 0.0;
    for &n in grid.interior_nodes() {
        min_interior = min_interior.min(psi.values[n]);
        let g = psi.grad_norm(n);
        max_grad = max_grad.max(g);
        if !region.in_omega0(&grid.coords(n)) {
            min_grad = min_grad.min(g);
        }
    }
    let max_boundary = grid
        .boundary_nodes()
        .iter()
        .fold(0.0f64, |m, &b| m.max(psi.values[b].abs()));
    let pass = min_interior > 0.0 && min_grad > GRAD_ZERO_TOL * max_grad && max_boundary == 0.0;
    PsiReport {
        min_interior_value: min_interior,
        min_grad_outside_omega0: min_grad,
        max_boundary_abs: max_boundary,
        pass,
    }
}

/// `lambda`, `s`, the horizon and the derived constants `eta`, `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParameters {
    pub lambda: f64,
    pub s: f64,
    pub horizon: f64,
    pub sup_norm: f64,
    pub eta: f64,
    pub gamma: f64,
    pub proof_regime: bool,
}

impl CarlemanParameters {
    pub fn new(lambda: f64, s: f64, horizon: f64, sup_norm: f64, proof_regime: bool) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) || !(s >= 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("need lambda, s >= 0, got {lambda}, {s}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(sup_norm >= 0.0 && sup_norm.is_finite()) {
            return Err(Error::invalid("psi sup-norm must be finite and nonnegative"));
        }
        let eta = (-lambda * sup_norm).exp();
        let gamma = (2.0 * lambda * sup_norm).exp();
        if proof_regime && s < gamma {
            return Err(Error::invalid(format!(
                "proof regime requires s >= gamma(lambda) = {gamma}, got s = {s}"
            )));
        }
        Ok(CarlemanParameters {
            lambda,
            s,
            horizon,
            sup_norm,
            eta,
            gamma,
            proof_regime,
        })
    }

    /// Same constants on a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(self.lambda, self.s, horizon, self.sup_norm, self.proof_regime)
    }

    /// `(s lambda)^3`.
    pub fn s3l3(&self) -> f64 {
        (self.s * self.lambda).powi(3)
    }
}

/// `alpha`, `phi`, `alpha0`, `phi0` tabulated at a list of interior times.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFields {
    times: Vec<f64>,
    nodes: usize,
    alpha: Vec<f64>,
    phi: Vec<f64>,
    alpha0: Vec<f64>,
    phi0: Vec<f64>,
    eta: f64,
    clamp_exponent: f64,
}

/// `exp` with the argument clamped to `[-CLAMP_EXPONENT, CLAMP_EXPONENT]`.
pub fn exp_clamped(x: f64) -> f64 {
    x.clamp(-CLAMP_EXPONENT, CLAMP_EXPONENT).exp()
}

pub fn evaluate_weights(
    psi: &WeightFunctionPsi,
    params: &CarlemanParameters,
    time_nodes: &[f64],
) -> Result<WeightFields> {
    let horizon = params.horizon;
    if let Some(&t) = time_nodes.iter().find(|&&t| !(t > 0.0 && t < horizon)) {
        return Err(Error::TimeNodeOnBoundary { t, horizon });
    }
    let lambda = params.lambda;
    let sup = psi.sup_norm();
    let eta = (-lambda * sup).exp();
    let gamma = (2.0 * lambda * sup).exp();
    let nodes = psi.values().len();
    let exp_psi: Vec<f64> = psi.values().iter().map(|&v| (lambda * v).exp()).collect();
    let mut alpha = Vec::with_capacity(nodes * time_nodes.len());
    let mut phi = Vec::with_capacity(nodes * time_nodes.len());
    let mut alpha0 = Vec::with_capacity(time_nodes.len());
    let mut phi0 = Vec::with_capacity(time_nodes.len());
    for &t in time_nodes {
        let theta = 1.0 / (t * (horizon - t));
        let a0 = (1.0 - gamma) * theta;
        let p0 = theta;
        let (a_hi, p_hi) = (a0 * (1.0 - eta), p0 / eta);
        for &e in &exp_psi {
            // the clamps only remove rounding-level excursions: the exact values
            // satisfy alpha0 <= alpha <= alpha0 (1 - eta), phi0 <= phi <= phi0 / eta
            alpha.push(((e - gamma) * theta).clamp(a0, a_hi));
            phi.push((e * theta).clamp(p0, p_hi));
        }
        alpha0.push(a0);
        phi0.push(p0);
    }
    Ok(WeightFields {
        times: time_nodes.to_vec(),
        nodes,
        alpha,
        phi,
        alpha0,
        phi0,
        eta,
        clamp_exponent: CLAMP_EXPONENT,
    })
}

impl WeightFields {
    /// Weights at the cell midpoints of `tg`.
    pub fn for_time_grid(psi: &WeightFunctionPsi, params: &CarlemanParameters, tg: &TimeGrid) -> Result<Self> {
        if (tg.horizon - params.horizon).abs() > 1e-12 * params.horizon {
            return Err(Error::invalid("time grid horizon differs from the Carleman horizon"));
        }
        evaluate_weights(psi, params, &tg.midpoints())
    }

    /// Builds a table directly; `alpha`/`phi` are time-major.
    pub fn from_tables(
        times: Vec<f64>,
        nodes: usize,
        alpha: Vec<f64>,
        phi: Vec<f64>,
        alpha0: Vec<f64>,
        phi0: Vec<f64>,
        eta: f64,
    ) -> Result<Self> {
        let k = times.len();
        if alpha.len() != k * nodes || phi.len() != k * nodes || alpha0.len() != k || phi0.len() != k {
            return Err(Error::invalid("weight table sizes are inconsistent"));
        }
        Ok(WeightFields {
            times,
            nodes,
            alpha,
            phi,
            alpha0,
            phi0,
            eta,
            clamp_exponent: CLAMP_EXPONENT,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time_count(&self) -> usize {
        self.times.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn clamp_exponent(&self) -> f64 {
        self.clamp_exponent
    }

    pub fn alpha(&self, j: usize, node: usize) -> f64 {
        self.alpha[j * self.nodes + node]
    }

    pub fn phi(&self, j: usize, node: usize) -> f64 {
        self.phi[j * self.nodes + node]
    }

    pub fn alpha0(&self, j: usize) -> f64 {
        self.alpha0[j]
    }

    pub fn phi0(&self, j: usize) -> f64 {
        self.phi0[j]
    }

    /// `e^{factor * alpha}` with clamped exponent.
    pub fn exp_weight(&self, factor: f64, j: usize, node: usize) -> f64 {
        exp_clamped(factor * self.alpha(j, node))
    }

    /// Whether `e^{factor * alpha}` hits the clamp at `(j, node)`.
    pub fn saturates(&self, factor: f64, j: usize, node: usize) -> bool {
        (factor * self.alpha(j, node)).abs() >= self.clamp_exponent
    }

    pub fn write_csv(&self, grid: &Grid, out: &mut impl Write) -> Result<()> {
        let coords = ["x", "y"][..grid.dims()].join(",");
        writeln!(out, "t,{coords},alpha,phi,alpha0,phi0")?;
        for (j, &t) in self.times.iter().enumerate() {
            for n in 0..self.nodes {
                let c: Vec<String> = grid.coords(n).iter().map(|v| v.to_string()).collect();
                writeln!(
                    out,
                    "{t},{},{},{},{},{}",
                    c.join(","),
                    self.alpha(j, n),
                    self.phi(j, n),
                    self.alpha0[j],
                    self.phi0[j]
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(nodes: usize) -> Arc<Grid> {
        Grid::new(SpatialDomain::interval(0.0, 1.0, nodes).unwrap())
    }

    #[test]
    fn domain_validation() {
        assert!(SpatialDomain::interval(1.0, 0.0, 16).is_err());
        assert!(SpatialDomain::interval(0.0, 1.0, 7).is_err());
        let grid = line(9);
        assert_eq!(grid.boundary_nodes(), &[0, 8]);
        let rect = Grid::new(SpatialDomain::rectangle((0.0, 1.0), (0.0, 1.0), (8, 9)).unwrap());
        for n in 0..rect.node_count() {
            let idx = rect.multi_index(n);
            let on_edge = idx[0] == 0 || idx[0] == 7 || idx[1] == 0 || idx[1] == 8;
            assert_eq!(on_edge, rect.is_boundary(n));
        }
    }

    #[test]
    fn region_inclusions_checked() {
        let grid = line(33);
        assert!(ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).is_ok());
        assert!(ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.2, 0.6)]).is_err());
        assert!(matches!(
            ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.31, 0.6)]),
            Err(Error::GridTooCoarse(_))
        ));
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        for n in 0..grid.node_count() {
            let x = grid.coord(n, 0);
            assert_eq!(region.indicator()[n] == 1.0, x > 0.3 && x < 0.7);
        }
    }

    #[test]
    fn centered_interval_uses_sine() {
        let grid = line(65);
        let region = ControlRegion::new(&grid, vec![(0.3, 0.7)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        assert!(matches!(psi.profile(), PsiProfile::Sine { .. }));
        for n in 0..grid.node_count() {
            let x = grid.coord(n, 0);
            assert!((psi.values()[n] - (std::f64::consts::PI * x).sin()).abs() < 1e-15);
        }
        assert!(verify_psi(&psi, &region).pass);
    }

    #[test]
    fn off_center_interval_uses_cubic_blend() {
        let grid = line(129);
        let region = ControlRegion::new(&grid, vec![(0.6, 0.9)], vec![(0.7, 0.8)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let PsiProfile::PiecewiseCubic { peak, .. } = psi.profile() else {
            panic!("expected the cubic blend");
        };
        assert!((peak - 0.75).abs() < 1e-15);
        let report = verify_psi(&psi, &region);
        assert!(report.pass, "{report:?}");
        // independent check: |psi'| > 0 at every node outside omega0, from the analytic profile
        for n in grid.interior_nodes() {
            let x = grid.coord(*n, 0);
            if !(0.7 < x && x < 0.8) {
                assert!(psi.grad(0)[*n].abs() > 1e-6, "psi' vanishes at {x}");
            }
        }
        // C^2 at the junction: one-sided second differences agree
        let prof = psi.profile();
        let e = 1e-4;
        let f = |x: f64| prof.eval(&[x]).unwrap();
        let left = (f(0.75) - 2.0 * f(0.75 - e) + f(0.75 - 2.0 * e)) / (e * e);
        let right = (f(0.75) - 2.0 * f(0.75 + e) + f(0.75 + 2.0 * e)) / (e * e);
        assert!((left - right).abs() < 1e-2 * left.abs());
        assert!((psi.sup_norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rectangle_psi() {
        let grid = Grid::new(SpatialDomain::rectangle((0.0, 1.0), (0.0, 1.0), (33, 33)).unwrap());
        let region =
            ControlRegion::new(&grid, vec![(0.3, 0.7), (0.3, 0.7)], vec![(0.4, 0.6), (0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        assert!(verify_psi(&psi, &region).pass);
        let center = grid.node_at(&[16, 16]);
        assert!(psi.grad_norm(center) < 1e-14);
        let off = ControlRegion::new(&grid, vec![(0.5, 0.9), (0.3, 0.7)], vec![(0.6, 0.8), (0.4, 0.6)]).unwrap();
        assert!(matches!(construct_psi(&grid, &off), Err(Error::RegionUnsupported(_))));
    }

    #[test]
    fn verify_psi_detects_bad_candidates() {
        let grid = line(65);
        let region = ControlRegion::new(&grid, vec![(0.6, 0.9)], vec![(0.7, 0.8)]).unwrap();
        let parabola = WeightFunctionPsi::from_values(grid.clone(), grid.sample(|x| x[0] * (1.0 - x[0]))).unwrap();
        let report = verify_psi(&parabola, &region);
        assert!(!report.pass);
        assert!(report.min_interior_value > 0.0);
        let zero = WeightFunctionPsi::from_values(grid.clone(), vec![0.0; 65]).unwrap();
        assert!(!verify_psi(&zero, &region).pass);
    }

    #[test]
    fn weights_direct_formula() {
        let grid = line(9);
        let region = ControlRegion::new(&grid, vec![(0.2, 0.8)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let params = CarlemanParameters::new(1.0, 1.0, 1.0, psi.sup_norm(), false).unwrap();
        let w = evaluate_weights(&psi, &params, &[0.5]).unwrap();
        assert!((w.phi0(0) - 4.0).abs() < 1e-15);
        assert!((w.alpha0(0) - 4.0 * (1.0 - 1f64.exp().powi(2))).abs() < 1e-12);
        assert!((w.alpha0(0) + 25.5562).abs() < 1e-4);
        let flat = CarlemanParameters::new(0.0, 1.0, 1.0, psi.sup_norm(), false).unwrap();
        let w = evaluate_weights(&psi, &flat, &[0.25, 0.5]).unwrap();
        assert_eq!(w.eta(), 1.0);
        for j in 0..2 {
            for n in 0..9 {
                assert_eq!(w.alpha(j, n), w.alpha0(j));
                assert_eq!(w.phi(j, n), w.phi0(j));
            }
        }
        assert!(matches!(
            evaluate_weights(&psi, &params, &[0.0, 0.5]),
            Err(Error::TimeNodeOnBoundary { .. })
        ));
        assert!(evaluate_weights(&psi, &params, &[1.0]).is_err());
    }

    #[test]
    fn weights_blow_up_at_both_ends() {
        let grid = line(33);
        let region = ControlRegion::new(&grid, vec![(0.2, 0.8)], vec![(0.4, 0.6)]).unwrap();
        let psi = construct_psi(&grid, &region).unwrap();
        let tg = TimeGrid::new(1.0, 64).unwrap();
        let params = CarlemanParameters::new(1.0, 0.1, 1.0, psi.sup_norm(), false).unwrap();
        let w = WeightFields::for_time_grid(&psi, &params, &tg).unwrap();
        let mid = 31;
        for n in grid.interior_nodes() {
            assert!(w.alpha(0, *n).abs() >= 10.0 * w.alpha(mid, *n).abs());
            assert!(w.alpha(63, *n).abs() >= 10.0 * w.alpha(mid, *n).abs());
            // e^{2 s alpha} is smallest on the first and last layers
            let col: Vec<f64> = (0..64).map(|j| w.exp_weight(2.0 * params.s, j, *n)).collect();
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(col[0] == min || col[63] == min);
            for j in 0..31 {
                assert!(col[j] <= col[j + 1]);
                assert!(col[63 - j] <= col[62 - j]);
            }
        }
    }

    #[test]
    fn proof_regime_enforces_s_at_least_gamma() {
        assert!(CarlemanParameters::new(1.0, 1.0, 1.0, 1.0, true).is_err());
        let p = CarlemanParameters::new(1.0, 8.0, 1.0, 1.0, true).unwrap();
        assert!((p.gamma - p.eta.powi(-2)).abs() < 1e-12);
        assert!(p.eta > 0.0 && p.eta < 1.0);
    }

    #[test]
    fn construction_is_deterministic() {
        let grid = line(41);
        let region = ControlRegion::new(&grid, vec![(0.5, 0.9)], vec![(0.6, 0.8)]).unwrap();
        let a = construct_psi(&grid, &region).unwrap();
        let b = construct_psi(&grid, &region).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn weight_bounds_hold_exactly(lambda in 0.0f64..4.0, t in 0.001f64..0.999, peak in 0.3f64..0.7) {
            let grid = line(33);
            let region = ControlRegion::new(&grid, vec![(peak - 0.2, peak + 0.2)], vec![(peak - 0.05, peak + 0.05)]).unwrap();
            let psi = construct_psi(&grid, &region).unwrap();
            let params = CarlemanParameters::new(lambda, 1.0, 1.0, psi.sup_norm(), false).unwrap();
            let w = evaluate_weights(&psi, &params, &[t]).unwrap();
            let eta = params.eta;
            for n in 0..grid.node_count() {
                prop_assert!(w.alpha0(0) <= w.alpha(0, n));
                prop_assert!(w.alpha(0, n) <= w.alpha0(0) * (1.0 - eta));
                prop_assert!(w.phi0(0) <= w.phi(0, n));
                prop_assert!(w.phi(0, n) <= w.phi0(0) / eta);
            }
        }
    }
}
