//! Experiment configuration: TOML schema, overrides and validation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::discretization::{lq_norm_values, Grid, ScalarField, TimeGrid};
use crate::error::{Error, Result};
use crate::fixed_point::PicardSettings;
use crate::geometry::{DomainKind, SpatialDomain};
use crate::nonlinearity::{manufactured_forcing, solve_stationary, ModelSpec, NonlinearityModel};

const REQUIRED: [&str; 7] = ["domain", "region", "model", "stationary", "time", "carleman", "initial_data"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub kind: DomainKind,
    pub bounds: Vec<(f64, f64)>,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub omega: Vec<(f64, f64)>,
    pub omega0: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub spec: ModelSpec,
    /// Interval on which the slope bounds are taken; unbounded when absent.
    #[serde(default)]
    pub range: Option<(f64, f64)>,
}

/// How the stationary target is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StationarySection {
    /// `y_s = amplitude * prod sin(pi x)`, `f` chosen so that it is exactly stationary.
    Profile { amplitude: f64 },
    /// Constant forcing; `y_s` solves the stationary problem.
    Forcing { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
    /// Fraction of the horizon spent in free evolution.
    #[serde(default)]
    pub switch_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanSection {
    pub lambda: f64,
    pub s: f64,
    #[serde(default)]
    pub proof_regime: bool,
}

/// Perturbation `y0 - y_s`, scaled so that its discrete L2 norm equals `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDataSection {
    /// `prod sin(mode pi x)`.
    Sine { size: f64, mode: usize },
    /// Smooth random series drawn from the run seed.
    Random { size: f64 },
    /// `cos^2` bump of half-width `width` centered at `center` (first axis).
    Bump { size: f64, width: f64, center: f64 },
}

impl InitialDataSection {
    pub fn size(&self) -> f64 {
        match *self {
            InitialDataSection::Sine { size, .. }
            | InitialDataSection::Random { size }
            | InitialDataSection::Bump { size, .. } => size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub max_outer: usize,
    pub tol_sup: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Target exponent of the `q_i` ladder.
    pub ladder_q: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = PicardSettings::default();
        SolverSection {
            max_outer: p.max_outer,
            tol_sup: p.tol_sup,
            cg_tol: p.cg_tol,
            cg_max_iter: p.cg_max_iter,
            ladder_q: 4.0,
        }
    }
}

impl SolverSection {
    pub fn picard(&self) -> PicardSettings {
        PicardSettings {
            max_outer: self.max_outer,
            tol_sup: self.tol_sup,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub carleman_samples: usize,
    pub observability_samples: usize,
    /// Exponent used in the estimate report.
    pub estimate_q: f64,
    /// Re-simulate the quasilinear equation with the computed control and require agreement.
    pub certify: bool,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            carleman_samples: 10,
            observability_samples: 10,
            estimate_q: 2.0,
            certify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub trajectories: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
            trajectories: true,
        }
    }
}

/// Axes of a sweep: dotted key to list of values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub domain: DomainSection,
    pub region: RegionSection,
    pub model: ModelSection,
    pub stationary: StationarySection,
    pub time: TimeSection,
    pub carleman: CarlemanSection,
    pub initial_data: InitialDataSection,
    pub solver: SolverSection,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

fn section<T: DeserializeOwned>(table: &toml::Table, key: &str) -> Result<Option<T>> {
    match table.get(key) {
        None => Ok(None),
        Some(v) => v
            .clone()
            .try_into()
            .map(Some)
            .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string())),
    }
}

fn required<T: DeserializeOwned>(table: &toml::Table, key: &str) -> Result<T> {
    section(table, key)?.ok_or_else(|| Error::config(key, "missing section"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

/// Sets `dotted.key = value`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses a command-line value: TOML literal if it parses, otherwise a string.
pub fn parse_value(text: &str) -> toml::Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let default_name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        Self::from_table(Self::parse_table(&text)?, &default_name)
    }

    pub fn parse_table(text: &str) -> Result<toml::Table> {
        text.parse::<toml::Table>()
            .map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn from_str(text: &str, default_name: &str) -> Result<Self> {
        Self::from_table(Self::parse_table(text)?, default_name)
    }

    pub fn from_table(table: toml::Table, default_name: &str) -> Result<Self> {
        const KNOWN: [&str; 13] = [
            "name", "seed", "domain", "region", "model", "stationary", "time", "carleman", "initial_data", "solver",
            "diagnostics", "output", "sweep",
        ];
        if let Some(k) = table.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        for key in REQUIRED {
            if !table.contains_key(key) {
                return Err(Error::config(key, "missing section"));
            }
        }
        let name = match table.get("name") {
            None => default_name.to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("name", "must be a string")),
        };
        let seed = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(Error::config("seed", "must be a nonnegative integer")),
        };
        let config = ExperimentConfig {
            name,
            seed,
            domain: required(&table, "domain")?,
            region: required(&table, "region")?,
            model: required(&table, "model")?,
            stationary: required(&table, "stationary")?,
            time: required(&table, "time")?,
            carleman: required(&table, "carleman")?,
            initial_data: required(&table, "initial_data")?,
            solver: section(&table, "solver")?.unwrap_or_default(),
            diagnostics: section(&table, "diagnostics")?.unwrap_or_default(),
            output: section(&table, "output")?.unwrap_or_default(),
            sweep: section(&table, "sweep")?.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Range checks that do not need the grid.
    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() {
            return Err(Error::config("seed", "must not exceed 2^63 - 1"));
        }
        positive("time.horizon", self.time.horizon)?;
        if self.time.steps < TimeGrid::MIN_STEPS || self.time.steps % 2 != 0 {
            return Err(Error::config("time.steps", "must be even and at least 16"));
        }
        if !(0.0..1.0).contains(&self.time.switch_fraction) {
            return Err(Error::config("time.switch_fraction", "must lie in [0, 1)"));
        }
        positive("carleman.lambda", self.carleman.lambda)?;
        positive("carleman.s", self.carleman.s)?;
        let size = self.initial_data.size();
        if !(size >= 0.0 && size.is_finite()) {
            return Err(Error::config("initial_data.size", "must be nonnegative and finite"));
        }
        positive("solver.tol_sup", self.solver.tol_sup)?;
        positive("solver.cg_tol", self.solver.cg_tol)?;
        if self.solver.max_outer == 0 || self.solver.cg_max_iter == 0 {
            return Err(Error::config("solver", "iteration caps must be positive"));
        }
        if self.diagnostics.estimate_q < 1.0 {
            return Err(Error::config("diagnostics.estimate_q", "must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let d = &self.domain;
        let domain = SpatialDomain::new(d.kind, d.bounds.clone(), d.nodes.clone())
            .map_err(|e| Error::config("domain", e.to_string()))?;
        Ok(Grid::new(domain))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.horizon, self.time.steps).map_err(|e| Error::config("time", e.to_string()))
    }

    pub fn nonlinearity(&self) -> Result<NonlinearityModel> {
        let range = self.model.range.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        NonlinearityModel::new(self.model.spec.clone(), range).map_err(|e| Error::config("model", e.to_string()))
    }

    /// `(y_s, f, stationary residual)`.
    pub fn stationary_state(&self, model: &NonlinearityModel, grid: &Arc<Grid>) -> Result<(ScalarField, ScalarField, f64)> {
        match self.stationary {
            StationarySection::Profile { amplitude } => {
                let bounds = grid.domain().bounds().to_vec();
                let ys = ScalarField::from_fn(grid.clone(), |x| {
                    amplitude * x.iter().zip(&bounds).map(|(c, (lo, hi))| (PI * (c - lo) / (hi - lo)).sin()).product::<f64>()
                });
                let mut ys = ys;
                for &b in grid.boundary_nodes() {
                    ys.values_mut()[b] = 0.0;
                }
                let f = manufactured_forcing(model, &ys);
                Ok((ys, f, 0.0))
            }
            StationarySection::Forcing { value } => {
                let f = ScalarField::from_fn(grid.clone(), |_| value);
                let st = solve_stationary(model, &f)?;
                Ok((st.y_s, st.f, st.residual_norm))
            }
        }
    }

    /// Perturbation `y0 - y_s` with discrete L2 norm `size`.
    pub fn perturbation(&self, grid: &Arc<Grid>, time: TimeGrid) -> Result<Vec<f64>> {
        let bounds = grid.domain().bounds().to_vec();
        let shape: Vec<f64> = match self.initial_data {
            InitialDataSection::Sine { mode, .. } => {
                if mode == 0 {
                    return Err(Error::config("initial_data.mode", "must be at least 1"));
                }
                grid.sample(|x| {
                    x.iter()
                        .zip(&bounds)
                        .map(|(c, (lo, hi))| (mode as f64 * PI * (c - lo) / (hi - lo)).sin())
                        .product()
                })
            }
            InitialDataSection::Random { .. } => {
                crate::diagnostics::random_sample(grid, time, self.seed, 0, false).p_t.into_values()
            }
            InitialDataSection::Bump { width, center, .. } => {
                positive("initial_data.width", width)?;
                crate::diagnostics::SmoothingFamily::Concentrating { height: 1.0, center }.perturbation(grid, width)?
            }
        };
        let mut shape = shape;
        for &b in grid.boundary_nodes() {
            shape[b] = 0.0;
        }
        let norm = lq_norm_values(grid, &shape, 2.0)?;
        let size = self.initial_data.size();
        if size == 0.0 {
            return Ok(vec![0.0; shape.len()]);
        }
        if !(norm > 0.0) {
            return Err(Error::config("initial_data", "profile vanishes on this grid"));
        }
        Ok(shape.iter().map(|v| v * size / norm).collect())
    }

    /// Points of a sweep: each entry is the list of `(key, value)` overrides.
    pub fn sweep_points(axes: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
        let mut points = vec![Vec::new()];
        for (key, values) in axes {
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }
}
