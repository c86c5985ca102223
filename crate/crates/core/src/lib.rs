//! Simulator for resonant quantum principal component analysis.
//!
//! A single probe qubit is coupled to a register holding a density matrix
//! `rho`. Sweeping the probe frequency `omega` flips the probe whenever
//! `omega` matches an eigenvalue of `rho`; post-selecting the flipped probe
//! leaves the register in the matching eigenvector.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod engine;
pub mod error;
pub mod model;
pub mod nvmap;
pub mod qmath;
pub mod scan;
pub mod study;

pub use error::{Error, Result};
