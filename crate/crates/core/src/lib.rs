//! Nonparametric maximum likelihood estimation of mixing distributions for
//! populations of linear Gaussian stochastic systems.
//!
//! Subject likelihoods come from exact discretization and the Kalman filter
//! ([`filtering`]); mixture weights on a grid from a primal-dual interior point
//! solver ([`ipm`]); the grid itself from the adaptive NPAG loop ([`npag`]);
//! and global optimality is certified by the directional derivative
//! ([`optimality`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod filtering;
pub mod ipm;
pub mod linalg;
pub mod models;
pub mod npag;
pub mod optimality;
pub mod psi;
pub mod report;
pub mod simulate;

pub use error::{NpagError, Result};
