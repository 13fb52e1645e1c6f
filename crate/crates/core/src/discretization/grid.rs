use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SpatialDomain;

const NOT_INTERIOR: usize = usize::MAX;

/// Uniform tensor grid over a [`SpatialDomain`].
///
/// Nodes are numbered with the x index running fastest. The boundary set is
/// exactly the nodes with some coordinate at `lo` or `hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: SpatialDomain,
    spacing: Vec<f64>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    slot: Vec<usize>,
}

impl Grid {
    pub fn new(domain: SpatialDomain) -> Arc<Grid> {
        let spacing: Vec<f64> = domain
            .bounds()
            .iter()
            .zip(domain.resolution())
            .map(|(&(lo, hi), &n)| (hi - lo) / (n - 1) as f64)
            .collect();
        let counts = domain.resolution().to_vec();
        let total: usize = counts.iter().product();
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut slot = vec![NOT_INTERIOR; total];
        for node in 0..total {
            let idx = multi_index(&counts, node);
            let on_boundary = idx.iter().zip(&counts).any(|(&i, &n)| i == 0 || i == n - 1);
            if on_boundary {
                boundary.push(node);
            } else {
                slot[node] = interior.len();
                interior.push(node);
            }
        }
        Arc::new(Grid {
            domain,
            spacing,
            interior,
            boundary,
            slot,
        })
    }

    pub fn domain(&self) -> &SpatialDomain {
        &self.domain
    }

    pub fn dims(&self) -> usize {
        self.spacing.len()
    }

    pub fn counts(&self) -> &[usize] {
        self.domain.resolution()
    }

    pub fn node_count(&self) -> usize {
        self.slot.len()
    }

    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.spacing[axis]
    }

    /// Measure of one grid cell, `h^n`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.slot[node] == NOT_INTERIOR
    }

    /// Position of `node` in the interior ordering.
    pub fn interior_slot(&self, node: usize) -> Option<usize> {
        match self.slot[node] {
            NOT_INTERIOR => None,
            s => Some(s),
        }
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        multi_index(self.counts(), node)
    }

    /// Node index from per-axis indices.
    pub fn node_at(&self, idx: &[usize]) -> usize {
        let counts = self.counts();
        let mut node = 0;
        let mut stride = 1;
        for (axis, &i) in idx.iter().enumerate() {
            node += i * stride;
            stride *= counts[axis];
        }
        node
    }

    /// Neighbour of `node` along `axis` (offset ±1), if it exists.
    pub fn neighbor(&self, node: usize, axis: usize, forward: bool) -> Option<usize> {
        let counts = self.counts();
        let stride: usize = counts[..axis].iter().product();
        let i = (node / stride) % counts[axis];
        if forward {
            (i + 1 < counts[axis]).then(|| node + stride)
        } else {
            (i > 0).then(|| node - stride)
        }
    }

    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        let idx = self.multi_index(node);
        self.domain.bounds()[axis].0 + idx[axis] as f64 * self.spacing[axis]
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        (0..self.dims()).map(|a| self.coord(node, a)).collect()
    }

    /// Trapezoidal quadrature weights over the full node set.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let counts = self.counts();
        (0..self.node_count())
            .map(|node| {
                let idx = multi_index(counts, node);
                idx.iter()
                    .enumerate()
                    .map(|(axis, &i)| {
                        let h = self.spacing[axis];
                        if i == 0 || i == counts[axis] - 1 {
                            0.5 * h
                        } else {
                            h
                        }
                    })
                    .product()
            })
            .collect()
    }

    pub fn gather_interior(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&n| full[n]).collect()
    }

    pub fn scatter_interior(&self, interior: &[f64], full: &mut [f64]) {
        for &b in &self.boundary {
            full[b] = 0.0;
        }
        for (&n, &v) in self.interior.iter().zip(interior) {
            full[n] = v;
        }
    }

    /// Evaluates `f` at every node.
    pub fn sample(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        (0..self.node_count()).map(|n| f(&self.coords(n))).collect()
    }
}

fn multi_index(counts: &[usize], node: usize) -> Vec<usize> {
    let mut rest = node;
    counts
        .iter()
        .map(|&n| {
            let i = rest % n;
            rest /= n;
            i
        })
        .collect()
}

/// Uniform time grid with layers `t_k = k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub const MIN_STEPS: usize = 16;

    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("time horizon must be positive, got {horizon}")));
        }
        if steps < Self::MIN_STEPS {
            return Err(Error::invalid(format!(
                "time grid needs at least {} steps, got {steps}",
                Self::MIN_STEPS
            )));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn layers(&self) -> usize {
        self.steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Midpoint of cell `j`, i.e. of `(t_j, t_{j+1})`.
    pub fn midpoint(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dt()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.steps).map(|j| self.midpoint(j)).collect()
    }
}

/// One time layer of a nodal field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::invalid(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.node_count();
        ScalarField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl FnMut(&[f64]) -> f64) -> Self {
        let values = grid.sample(f);
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn vanishes_on_boundary(&self, tol: f64) -> bool {
        self.grid
            .boundary_nodes()
            .iter()
            .all(|&b| self.values[b].abs() <= tol)
    }
}

/// Time-layer-indexed trajectory on a fixed spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Arc<Grid>,
    time: TimeGrid,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: Arc<Grid>, time: TimeGrid) -> Self {
        let len = grid.node_count() * time.layers();
        SpaceTimeField {
            grid,
            time,
            data: vec![0.0; len],
        }
    }

    pub fn from_layers(grid: Arc<Grid>, time: TimeGrid, layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.len() != time.layers() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                time.layers(),
                layers.len()
            )));
        }
        let n = grid.node_count();
        let mut data = Vec::with_capacity(n * layers.len());
        for layer in layers {
            if layer.len() != n {
                return Err(Error::invalid("layer length does not match grid"));
            }
            data.extend(layer);
        }
        Ok(SpaceTimeField { grid, time, data })
    }

    pub fn from_flat(grid: Arc<Grid>, time: TimeGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.node_count() * time.layers() {
            return Err(Error::invalid("flat data length does not match grid and time layers"));
        }
        Ok(SpaceTimeField { grid, time, data })
    }

    /// Constant-in-time field.
    pub fn constant(field: &ScalarField, time: TimeGrid) -> Self {
        let mut data = Vec::with_capacity(field.values().len() * time.layers());
        for _ in 0..time.layers() {
            data.extend_from_slice(field.values());
        }
        SpaceTimeField {
            grid: field.grid().clone(),
            time,
            data,
        }
    }

    pub fn from_fn(grid: Arc<Grid>, time: TimeGrid, mut f: impl FnMut(&[f64], f64) -> f64) -> Self {
        let coords: Vec<Vec<f64>> = (0..grid.node_count()).map(|n| grid.coords(n)).collect();
        let mut data = Vec::with_capacity(coords.len() * time.layers());
        for k in 0..time.layers() {
            let t = time.time(k);
            data.extend(coords.iter().map(|x| f(x, t)));
        }
        SpaceTimeField { grid, time, data }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn layer_count(&self) -> usize {
        self.time.layers()
    }

    pub fn layer(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.node_count();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn snapshot(&self, k: usize) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.layer(k).to_vec(),
        }
    }

    pub fn last(&self) -> ScalarField {
        self.snapshot(self.time.steps)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `max |v|` over all nodes and layers.
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup-distance over all nodes and layers.
    pub fn sup_distance(&self, other: &SpaceTimeField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn zip_map(&self, other: &SpaceTimeField, f: impl Fn(f64, f64) -> f64) -> SpaceTimeField {
        SpaceTimeField {
            grid: self.grid.clone(),
            time: self.time,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Subtracts a stationary field from every layer.
    pub fn minus_stationary(&self, field: &ScalarField) -> SpaceTimeField {
        let n = self.grid.node_count();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v - field.values()[i % n])
            .collect();
        SpaceTimeField {
            grid: self.grid.clone(),
            time: self.time,
            data,
        }
    }
}
