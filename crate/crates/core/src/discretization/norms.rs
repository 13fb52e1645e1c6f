//! Plain and Carleman-weighted norms.
//!
//! Space integrals use the trapezoidal rule over nodes; time integrals use the
//! midpoint rule over cells, with the field averaged between the two layers
//! bounding each cell.

use std::ops::Range;

use super::grid::{Grid, ScalarField, SpaceTimeField};
use super::sparse::FaceCoefficients;
use crate::error::{Error, Result};
use crate::geometry::WeightFields;

fn check_exponent(q: f64) -> Result<()> {
    if q.is_nan() || q < 1.0 {
        Err(Error::BadExponent(q))
    } else {
        Ok(())
    }
}

/// `(sum_i w_i |v_i|^q)^(1/q)`, or `max |v_i|` when `q` is infinite.
pub(crate) fn weighted_lq(quad: &[f64], values: &[f64], q: f64) -> f64 {
    if q.is_infinite() {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else if q == 2.0 {
        quad.iter()
            .zip(values)
            .map(|(w, v)| w * v * v)
            .sum::<f64>()
            .sqrt()
    } else {
        quad.iter()
            .zip(values)
            .map(|(w, v)| w * v.abs().powf(q))
            .sum::<f64>()
            .powf(1.0 / q)
    }
}

/// Discrete `L^q(Omega)` norm of one layer.
pub fn lq_norm(field: &ScalarField, q: f64) -> Result<f64> {
    check_exponent(q)?;
    Ok(weighted_lq(&field.grid().quadrature_weights(), field.values(), q))
}

/// `L^q` norm of a raw nodal vector on `grid`.
pub fn lq_norm_values(grid: &Grid, values: &[f64], q: f64) -> Result<f64> {
    check_exponent(q)?;
    Ok(weighted_lq(&grid.quadrature_weights(), values, q))
}

/// Spatial L^2 inner product with trapezoidal weights.
pub fn l2_inner(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    grid.quadrature_weights()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

/// Mixed `L^{q_time}(cells; L^{q_space}(Omega))` norm of
/// `integrand(cell, node, midpoint value)`.
pub fn mixed_norm(
    field: &SpaceTimeField,
    cells: Range<usize>,
    q_time: f64,
    q_space: f64,
    mut integrand: impl FnMut(usize, usize, f64) -> f64,
) -> Result<f64> {
    check_exponent(q_time)?;
    check_exponent(q_space)?;
    let grid = field.grid();
    let quad = grid.quadrature_weights();
    let dt = field.time().dt();
    let mut buf = vec![0.0; grid.node_count()];
    let mut per_cell = Vec::with_capacity(cells.len());
    for j in cells {
        let (a, b) = (field.layer(j), field.layer(j + 1));
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = integrand(j, n, 0.5 * (a[n] + b[n]));
        }
        per_cell.push(weighted_lq(&quad, &buf, q_space));
    }
    let dts = vec![dt; per_cell.len()];
    Ok(weighted_lq(&dts, &per_cell, q_time))
}

/// `|| e^{s alpha} phi^{-i} v ||` in `L^{q_time}(0,T; L^{q_space})`.
pub fn weighted_spacetime_norm(
    field: &SpaceTimeField,
    weights: &WeightFields,
    s: f64,
    i: usize,
    q_time: f64,
    q_space: f64,
) -> Result<f64> {
    weighted_spacetime_norm_on(field, weights, s, i, q_time, q_space, 0..field.time().steps)
}

/// As [`weighted_spacetime_norm`], restricted to a range of time cells.
pub fn weighted_spacetime_norm_on(
    field: &SpaceTimeField,
    weights: &WeightFields,
    s: f64,
    i: usize,
    q_time: f64,
    q_space: f64,
    cells: Range<usize>,
) -> Result<f64> {
    if weights.time_count() != field.time().steps {
        return Err(Error::invalid("weight table does not match the time grid"));
    }
    let power = i as i32;
    mixed_norm(field, cells, q_time, q_space, |j, n, v| {
        if v == 0.0 {
            0.0
        } else {
            weights.exp_weight(s, j, n) * weights.phi(j, n).powi(-power) * v
        }
    })
}

/// Nodal gradient: centered differences inside, one-sided on the boundary.
pub fn nodal_gradient(grid: &Grid, values: &[f64]) -> Vec<Vec<f64>> {
    (0..grid.dims())
        .map(|axis| {
            let h = grid.spacing(axis);
            (0..grid.node_count())
                .map(|n| {
                    match (grid.neighbor(n, axis, false), grid.neighbor(n, axis, true)) {
                        (Some(l), Some(r)) => (values[r] - values[l]) / (2.0 * h),
                        (None, Some(r)) => (values[r] - values[n]) / h,
                        (Some(l), None) => (values[n] - values[l]) / h,
                        (None, None) => 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

/// Pointwise Euclidean length of the nodal gradient.
pub fn gradient_magnitude(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let g = nodal_gradient(grid, values);
    (0..grid.node_count())
        .map(|n| g.iter().map(|c| c[n] * c[n]).sum::<f64>().sqrt())
        .collect()
}

/// `|| grad v ||_inf` of one layer.
pub fn gradient_sup_norm(grid: &Grid, values: &[f64]) -> f64 {
    gradient_magnitude(grid, values)
        .into_iter()
        .fold(0.0, f64::max)
}

/// `sum_faces b (dv/h)(dw/h) h^n`, the bilinear form of `-div(b grad .)`.
pub fn face_gradient_pairing(grid: &Grid, faces: &FaceCoefficients, v: &[f64], w: &[f64]) -> f64 {
    let vol = grid.cell_volume();
    let mut acc = 0.0;
    for axis in 0..grid.dims() {
        let h = grid.spacing(axis);
        for n in 0..grid.node_count() {
            if let Some(m) = grid.neighbor(n, axis, true) {
                acc += faces.get(axis, n) * (v[m] - v[n]) * (w[m] - w[n]) / (h * h);
            }
        }
    }
    acc * vol
}
