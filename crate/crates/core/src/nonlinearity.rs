//! Diffusion nonlinearities `a(y)` with certified slope bounds, their global
//! extension outside a bounded interval, and stationary states.

use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::discretization::{assemble_faces, lq_norm_values, FaceCoefficients, Grid, ScalarField, ShiftedSolver};
use crate::error::{Error, Result};

/// Built-in families of `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `a(y) = c y`
    Linear { c: f64 },
    /// `a(y) = y + beta y^3`
    Cubic { beta: f64 },
    /// `a(y) = (y^2 + eps^2)^((m-1)/2) y`
    Porous { m: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Base(ModelSpec),
    Extended(Box<Extension>),
}

/// Data of a model extended outside `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
struct Extension {
    inner: NonlinearityModel,
    lo: f64,
    hi: f64,
    delta: f64,
    at_lo: [f64; 3],
    at_hi: [f64; 3],
}

/// A strictly increasing `a` with `a(0) = 0` and `mu <= a' <= m_bound` on `valid_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearityModel {
    kind: Kind,
    valid_range: (f64, f64),
    mu: f64,
    m_bound: f64,
}

impl ModelSpec {
    fn eval(&self, y: f64) -> [f64; 3] {
        match *self {
            ModelSpec::Linear { c } => [c * y, c, 0.0],
            ModelSpec::Cubic { beta } => [y + beta * y * y * y, 1.0 + 3.0 * beta * y * y, 6.0 * beta * y],
            ModelSpec::Porous { m, eps } => {
                let r = y * y + eps * eps;
                let k = 0.5 * (m - 3.0);
                let rk = r.powf(k);
                let a = r.powf(0.5 * (m - 1.0)) * y;
                let da = rk * (m * y * y + eps * eps);
                let dda = 2.0 * y * rk / r * (k * (m * y * y + eps * eps) + m * r);
                [a, da, dda]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelSpec::Linear { c } => c > 0.0 && c.is_finite(),
            ModelSpec::Cubic { beta } => beta.is_finite(),
            ModelSpec::Porous { m, eps } => m > 0.0 && m.is_finite() && eps > 0.0 && eps.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad model parameters: {self:?}")))
        }
    }
}

impl NonlinearityModel {
    /// Builds a catalog model valid on `range`.
    ///
    /// All catalog slopes are monotone in `|y|`, so the extreme slopes sit at
    /// the endpoints or at the point of the range closest to zero.
    pub fn new(spec: ModelSpec, range: (f64, f64)) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = range;
        if !(lo < hi) || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("bad model range ({lo}, {hi})")));
        }
        if !(lo <= 0.0 && 0.0 <= hi) {
            return Err(Error::invalid("model range must contain 0"));
        }
        let (mu, m_bound) = match spec {
            ModelSpec::Linear { c } => (c, c),
            _ => {
                let far = lo.abs().max(hi.abs());
                let (s0, s1) = (spec.eval(0.0)[1], spec.eval(far)[1]);
                (s0.min(s1), s0.max(s1))
            }
        };
        if !(mu > 0.0) {
            return Err(Error::invalid(format!("a' is not positive on ({lo}, {hi}): min {mu}")));
        }
        Ok(NonlinearityModel {
            kind: Kind::Base(spec),
            valid_range: range,
            mu,
            m_bound,
        })
    }

    pub fn linear(c: f64) -> Result<Self> {
        Self::new(ModelSpec::Linear { c }, (f64::NEG_INFINITY, f64::INFINITY))
    }

    pub fn valid_range(&self) -> (f64, f64) {
        self.valid_range
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn m_bound(&self) -> f64 {
        self.m_bound
    }

    /// Whether `a''` vanishes identically.
    pub fn is_linear(&self) -> bool {
        match &self.kind {
            Kind::Base(ModelSpec::Linear { .. }) => true,
            Kind::Base(_) => false,
            Kind::Extended(e) => e.inner.is_linear(),
        }
    }

    /// `(a, a', a'')` at `y`.
    pub fn eval_all(&self, y: f64) -> [f64; 3] {
        match &self.kind {
            Kind::Base(spec) => spec.eval(y),
            Kind::Extended(ext) => ext.eval(y),
        }
    }

    pub fn a(&self, y: f64) -> f64 {
        self.eval_all(y)[0]
    }

    pub fn da(&self, y: f64) -> f64 {
        self.eval_all(y)[1]
    }

    pub fn dda(&self, y: f64) -> f64 {
        self.eval_all(y)[2]
    }

    /// Slope bounds on a sub-interval.
    fn bounds_on(&self, lo: f64, hi: f64) -> (f64, f64) {
        match &self.kind {
            Kind::Base(ModelSpec::Linear { c }) => (*c, *c),
            Kind::Base(spec) => {
                let near = if lo <= 0.0 && 0.0 <= hi { 0.0 } else { lo.abs().min(hi.abs()) };
                let far = lo.abs().max(hi.abs());
                let (s0, s1) = (spec.eval(near)[1], spec.eval(far)[1]);
                (s0.min(s1), s0.max(s1))
            }
            Kind::Extended(_) => (self.mu, self.m_bound),
        }
    }

    /// Divided difference `(a(v) - a(u)) / (v - u)`, or `a'` at the midpoint
    /// when the two arguments nearly coincide.
    pub fn secant(&self, u: f64, v: f64) -> f64 {
        let d = v - u;
        if d.abs() <= 1e-6 * (1.0 + u.abs().max(v.abs())) {
            self.da(0.5 * (u + v))
        } else {
            (self.a(v) - self.a(u)) / d
        }
    }

    /// Solves `a(y) = w` by Newton steps kept inside a bisection bracket.
    pub fn invert(&self, w: f64) -> Result<f64> {
        let fail = |residual| Error::NewtonDiverged { layer: 0, residual };
        if w == 0.0 {
            return Ok(0.0);
        }
        let (rlo, rhi) = self.valid_range;
        let mut step = (w.abs() / self.m_bound.max(f64::MIN_POSITIVE)).max(1e-300);
        let (mut lo, mut hi) = if w > 0.0 { (0.0, step) } else { (-step, 0.0) };
        let mut expand = 0;
        while !(self.a(lo) <= w && w <= self.a(hi)) {
            step *= 2.0;
            if w > 0.0 {
                lo = hi;
                hi = (hi + step).min(rhi);
            } else {
                hi = lo;
                lo = (lo - step).max(rlo);
            }
            expand += 1;
            if expand > 2000 || (w > 0.0 && hi >= rhi && self.a(hi) < w) || (w < 0.0 && lo <= rlo && self.a(lo) > w) {
                return Err(fail(w.abs()));
            }
        }
        let tol = 4.0 * f64::EPSILON * (1.0 + w.abs());
        let mut y = 0.5 * (lo + hi);
        for _ in 0..50 {
            let [ay, day, _] = self.eval_all(y);
            let r = ay - w;
            if r.abs() <= tol {
                return Ok(y);
            }
            if r > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let newton = y - r / day;
            y = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 2.0 * f64::EPSILON * y.abs().max(f64::MIN_POSITIVE) {
                return Ok(y);
            }
        }
        let r = (self.a(y) - w).abs();
        if r <= 1e3 * tol {
            Ok(y)
        } else {
            Err(fail(r))
        }
    }

    /// Extension agreeing with `a` on `[lo, hi]` whose slope stays in
    /// `[mu_A, M_A]` on the whole line.
    ///
    /// Outside the interval `a''` is switched off by a smooth step of width
    /// `delta`, then integrated twice. `delta` starts at a tenth of the
    /// interval length and is halved until the slope stays positive.
    pub fn globalize(&self, interval: (f64, f64)) -> Result<NonlinearityModel> {
        let (lo, hi) = interval;
        let (rlo, rhi) = self.valid_range;
        if !(lo < hi) || lo < rlo || hi > rhi {
            return Err(Error::IntervalOutsideRange {
                lo,
                hi,
                range_lo: rlo,
                range_hi: rhi,
            });
        }
        let (mu_in, m_in) = self.bounds_on(lo, hi);
        let at_lo = self.eval_all(lo);
        let at_hi = self.eval_all(hi);
        let half = smooth_step_moments().0;
        let mut delta = 0.1 * (hi - lo);
        for _ in 0..60 {
            let end_hi = at_hi[1] + at_hi[2] * delta * half;
            let end_lo = at_lo[1] - at_lo[2] * delta * half;
            let mu = mu_in.min(end_hi).min(end_lo);
            if mu > 0.0 {
                let m_bound = m_in.max(end_hi).max(end_lo);
                return Ok(NonlinearityModel {
                    kind: Kind::Extended(Box::new(Extension {
                        inner: self.clone(),
                        lo,
                        hi,
                        delta,
                        at_lo,
                        at_hi,
                    })),
                    valid_range: (f64::NEG_INFINITY, f64::INFINITY),
                    mu,
                    m_bound,
                });
            }
            delta *= 0.5;
        }
        Err(Error::invalid("could not keep the extended slope positive"))
    }
}

impl Extension {
    fn eval(&self, y: f64) -> [f64; 3] {
        if y > self.hi {
            let [a, da, dda] = self.at_hi;
            let t = (y - self.hi) / self.delta;
            let (i1, i2, chi) = tail_integrals(t);
            [
                a + da * (y - self.hi) + dda * self.delta * self.delta * i2,
                da + dda * self.delta * i1,
                dda * chi,
            ]
        } else if y < self.lo {
            let [a, da, dda] = self.at_lo;
            let t = (self.lo - y) / self.delta;
            let (i1, i2, chi) = tail_integrals(t);
            [
                a + da * (y - self.lo) + dda * self.delta * self.delta * i2,
                da - dda * self.delta * i1,
                dda * chi,
            ]
        } else {
            self.inner.eval_all(y)
        }
    }
}

/// `1` near 0, `0` beyond 1, C-infinity in between.
fn smooth_step(t: f64) -> f64 {
    let rho = |x: f64| if x <= 0.0 { 0.0 } else { (-1.0 / x).exp() };
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        let (a, b) = (rho(t), rho(1.0 - t));
        b / (a + b)
    }
}

const PANELS: usize = 16;

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre_rule(12))
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub(crate) fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `(int_0^c chi, int_0^c (t - x) chi(x) dx)` with `c = min(t, 1)`.
fn step_integrals(t: f64) -> (f64, f64) {
    let c = t.min(1.0);
    if c <= 0.0 {
        return (0.0, 0.0);
    }
    let (nodes, weights) = gauss_legendre();
    let h = c / PANELS as f64;
    let (mut i1, mut i2) = (0.0, 0.0);
    for p in 0..PANELS {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            let s = mid + 0.5 * h * x;
            let v = 0.5 * h * w * smooth_step(s);
            i1 += v;
            i2 += (t - s) * v;
        }
    }
    (i1, i2)
}

/// `(int_0^1 chi, int_0^1 x chi)`.
fn smooth_step_moments() -> (f64, f64) {
    static M: OnceLock<(f64, f64)> = OnceLock::new();
    *M.get_or_init(|| {
        let (i1, i2) = step_integrals(1.0);
        (i1, i1 - i2)
    })
}

fn tail_integrals(t: f64) -> (f64, f64, f64) {
    if t >= 1.0 {
        let (m0, m1) = smooth_step_moments();
        (m0, t * m0 - m1, 0.0)
    } else {
        let (i1, i2) = step_integrals(t);
        (i1, i2, smooth_step(t))
    }
}

/// Discrete Laplacian with unit face coefficients.
pub fn unit_laplacian(grid: &Arc<Grid>) -> crate::discretization::SparseOperator {
    assemble_faces(grid, &FaceCoefficients::uniform(grid, 1.0))
}

/// `Delta_h a(y)`, zero on the boundary.
pub fn quasilinear_laplacian(model: &NonlinearityModel, y: &ScalarField) -> ScalarField {
    unit_laplacian(y.grid()).apply_field(&y.map(|v| model.a(v)))
}

/// `-Delta a(y_s) = f` with `y_s = 0` on the boundary.
#[derive(Debug, Clone)]
pub struct StationaryState {
    pub y_s: ScalarField,
    pub f: ScalarField,
    pub residual_norm: f64,
}

/// Solves the Poisson problem for `w = a(y_s)` and inverts `a` node by node.
pub fn solve_stationary(model: &NonlinearityModel, f: &ScalarField) -> Result<StationaryState> {
    let grid = f.grid();
    if f.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("stationary forcing is not finite"));
    }
    let op = unit_laplacian(grid);
    let rhs = grid.gather_interior(f.values());
    let solver = ShiftedSolver::new(&op, &vec![0.0; op.size()], 1.0);
    let mut w = vec![0.0; op.size()];
    solver.solve(&rhs, &mut w)?;
    let mut full = vec![0.0; grid.node_count()];
    for (slot, &n) in grid.interior_nodes().iter().enumerate() {
        full[n] = model.invert(w[slot]).map_err(|e| match e {
            Error::NewtonDiverged { residual, .. } => Error::NewtonDiverged { layer: n, residual },
            other => other,
        })?;
    }
    let y_s = ScalarField::new(grid.clone(), full)?;
    let lap = quasilinear_laplacian(model, &y_s);
    let res: Vec<f64> = lap.values().iter().zip(f.values()).map(|(l, f)| l + f).collect();
    let mut res_int = vec![0.0; grid.node_count()];
    for &n in grid.interior_nodes() {
        res_int[n] = res[n];
    }
    let residual_norm = lq_norm_values(grid, &res_int, 2.0)?;
    Ok(StationaryState {
        y_s,
        f: f.clone(),
        residual_norm,
    })
}

/// `f = -Delta_h a(y_s)`, so that `y_s` is exactly stationary for the scheme.
pub fn manufactured_forcing(model: &NonlinearityModel, y_s: &ScalarField) -> ScalarField {
    quasilinear_laplacian(model, y_s).map(|v| -v)
}
