//! Numerical null-controllability toolkit for quasilinear parabolic equations.

pub mod config;
pub mod control;
pub mod diagnostics;
pub mod discretization;
pub mod error;
pub mod experiment;
pub mod fixed_point;
pub mod geometry;
pub mod nonlinearity;
pub mod solvers;

pub use error::{Error, Result};
