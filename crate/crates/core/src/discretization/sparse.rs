//! Sparse elliptic operators `div(b grad .)` on interior nodes and the
//! shifted systems `(D - dt L) x = r` that implicit time stepping produces.

use super::grid::{Grid, ScalarField};
use crate::error::{Error, Result};

/// Diffusion coefficients living on cell faces.
///
/// `values[axis][node]` is the coefficient on the face between `node` and its
/// forward neighbour along `axis`; entries for nodes without a forward
/// neighbour are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceCoefficients {
    values: Vec<Vec<f64>>,
}

impl FaceCoefficients {
    pub fn uniform(grid: &Grid, b: f64) -> Self {
        FaceCoefficients {
            values: vec![vec![b; grid.node_count()]; grid.dims()],
        }
    }

    /// Face values from a two-point rule applied to nodal data.
    pub fn from_nodal(grid: &Grid, nodal: &[f64], mut rule: impl FnMut(f64, f64) -> f64) -> Self {
        let values = (0..grid.dims())
            .map(|axis| {
                (0..grid.node_count())
                    .map(|n| match grid.neighbor(n, axis, true) {
                        Some(m) => rule(nodal[n], nodal[m]),
                        None => 0.0,
                    })
                    .collect()
            })
            .collect();
        FaceCoefficients { values }
    }

    /// Harmonic means of a nodal coefficient.
    pub fn harmonic(grid: &Grid, b: &[f64]) -> Self {
        Self::from_nodal(grid, b, |l, r| 2.0 * l * r / (l + r))
    }

    pub fn get(&self, axis: usize, node: usize) -> f64 {
        self.values[axis][node]
    }

    /// Smallest coefficient over all real faces.
    pub fn min(&self, grid: &Grid) -> f64 {
        let mut m = f64::INFINITY;
        for (axis, vals) in self.values.iter().enumerate() {
            for (n, &v) in vals.iter().enumerate() {
                if grid.neighbor(n, axis, true).is_some() {
                    m = m.min(v);
                }
            }
        }
        m
    }
}

/// Compressed sparse row matrix over the interior nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dims: usize,
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
}

/// Second-order flux discretization of `div(b grad .)` with harmonic-mean face
/// coefficients and Dirichlet rows eliminated.
pub fn assemble_elliptic(b: &ScalarField) -> Result<SparseOperator> {
    let min = b.values().iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::NonpositiveCoefficient { min });
    }
    let grid = b.grid();
    Ok(assemble_faces(grid, &FaceCoefficients::harmonic(grid, b.values())))
}

/// Assembles `div(b grad .)` for explicitly given face coefficients.
pub fn assemble_faces(grid: &Grid, faces: &FaceCoefficients) -> SparseOperator {
    let n = grid.interior_count();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n * (2 * grid.dims() + 1));
    let mut vals = Vec::with_capacity(n * (2 * grid.dims() + 1));
    row_ptr.push(0);
    for &node in grid.interior_nodes() {
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(2 * grid.dims() + 1);
        let mut diag = 0.0;
        for axis in 0..grid.dims() {
            let h2 = grid.spacing(axis).powi(2);
            // interior nodes always have both neighbours
            let fwd = grid.neighbor(node, axis, true).expect("interior node");
            let bwd = grid.neighbor(node, axis, false).expect("interior node");
            let cf = faces.get(axis, node) / h2;
            let cb = faces.get(axis, bwd) / h2;
            diag -= cf + cb;
            if let Some(s) = grid.interior_slot(fwd) {
                entries.push((s, cf));
            }
            if let Some(s) = grid.interior_slot(bwd) {
                entries.push((s, cb));
            }
        }
        entries.push((grid.interior_slot(node).unwrap(), diag));
        entries.sort_by_key(|e| e.0);
        for (c, v) in entries {
            col_idx.push(c);
            vals.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    SparseOperator {
        dims: grid.dims(),
        n,
        row_ptr,
        col_idx,
        vals,
        symmetric: true,
    }
}

impl SparseOperator {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn is_flagged_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (row, out) in y.iter_mut().enumerate().take(self.n) {
            let mut acc = 0.0;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    /// Applies the operator to a full nodal field; the result vanishes on the boundary.
    pub fn apply_field(&self, field: &ScalarField) -> ScalarField {
        let grid = field.grid();
        let x = grid.gather_interior(field.values());
        let mut y = vec![0.0; self.n];
        self.apply(&x, &mut y);
        let mut full = vec![0.0; grid.node_count()];
        grid.scatter_interior(&y, &mut full);
        ScalarField::new(grid.clone(), full).expect("same grid")
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        (self.row_ptr[row]..self.row_ptr[row + 1])
            .find(|&k| self.col_idx[k] == col)
            .map(|k| self.vals[k])
            .unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.entry(r, r)).collect()
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in 0..self.n {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                let col = self.col_idx[k];
                worst = worst.max((self.vals[k] - self.entry(col, row)).abs());
            }
        }
        worst
    }

    /// Tridiagonal bands `(sub, main, sup)` for one-dimensional operators.
    fn bands(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if self.dims != 1 {
            return None;
        }
        let main = self.diagonal();
        let sub = (0..self.n)
            .map(|r| if r > 0 { self.entry(r, r - 1) } else { 0.0 })
            .collect();
        let sup = (0..self.n)
            .map(|r| if r + 1 < self.n { self.entry(r, r + 1) } else { 0.0 })
            .collect();
        Some((sub, main, sup))
    }
}

/// Relative residual at which iterative solves are accepted.
pub const LINEAR_TOL: f64 = 1e-11;

/// Solver for `(diag(d) - dt A) x = r` with `A` symmetric negative definite.
///
/// One-dimensional operators are tridiagonal and are factorized once
/// (Thomas elimination); otherwise Jacobi-preconditioned conjugate gradients.
#[derive(Debug, Clone)]
pub enum ShiftedSolver {
    Tridiagonal {
        sub: Vec<f64>,
        sup_mod: Vec<f64>,
        inv_pivot: Vec<f64>,
    },
    Cg {
        matrix: SparseOperator,
        inv_diag: Vec<f64>,
    },
}

impl ShiftedSolver {
    pub fn new(op: &SparseOperator, shift: &[f64], dt: f64) -> Self {
        if let Some((sub, main, sup)) = op.bands() {
            let n = main.len();
            let sub: Vec<f64> = sub.iter().map(|v| -dt * v).collect();
            let sup: Vec<f64> = sup.iter().map(|v| -dt * v).collect();
            let mut sup_mod = vec![0.0; n];
            let mut inv_pivot = vec![0.0; n];
            let mut prev = 0.0;
            for i in 0..n {
                let pivot = shift[i] - dt * main[i] - sub[i] * prev;
                inv_pivot[i] = 1.0 / pivot;
                sup_mod[i] = sup[i] * inv_pivot[i];
                prev = sup_mod[i];
            }
            return ShiftedSolver::Tridiagonal {
                sub,
                sup_mod,
                inv_pivot,
            };
        }
        let mut matrix = op.clone();
        for row in 0..matrix.n {
            for k in matrix.row_ptr[row]..matrix.row_ptr[row + 1] {
                matrix.vals[k] *= -dt;
                if matrix.col_idx[k] == row {
                    matrix.vals[k] += shift[row];
                }
            }
        }
        let inv_diag = matrix.diagonal().iter().map(|d| 1.0 / d).collect();
        ShiftedSolver::Cg { matrix, inv_diag }
    }

    pub fn solve(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        match self {
            ShiftedSolver::Tridiagonal {
                sub,
                sup_mod,
                inv_pivot,
            } => {
                let n = rhs.len();
                let mut prev = 0.0;
                for i in 0..n {
                    prev = (rhs[i] - sub[i] * prev) * inv_pivot[i];
                    x[i] = prev;
                }
                for i in (0..n.saturating_sub(1)).rev() {
                    x[i] -= sup_mod[i] * x[i + 1];
                }
                Ok(())
            }
            ShiftedSolver::Cg { matrix, inv_diag } => pcg(matrix, inv_diag, rhs, x),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG; `x` is used as the initial guess.
fn pcg(a: &SparseOperator, inv_diag: &[f64], b: &[f64], x: &mut [f64]) -> Result<()> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let max_iter = 10 * n + 100;
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    for _ in 0..max_iter {
        if rel <= LINEAR_TOL {
            return Ok(());
        }
        a.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
    }
    if rel <= LINEAR_TOL {
        Ok(())
    } else {
        Err(Error::LinearSolveStalled {
            iterations: max_iter,
            residual: rel,
        })
    }
}
