//! Simulation and pathwise diagnostics for one-dimensional jump SDEs whose
//! drift is only a distribution.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod error;
pub mod generator;
pub mod kernels;
pub mod pathcalc;
pub mod quadrature;
pub mod scenarios;
pub mod simulator;
pub mod stats;

pub use error::{LabError, Result};
