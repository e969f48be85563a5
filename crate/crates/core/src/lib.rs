//! Belief roadmap planning with proximal-gradient covariance steering.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`] - control-affine models, linearisation and measurement Jacobians.
//! * [`sdf`] - signed distance fields, the hinge collision cost and collision checks.
//! * [`steering`] - linear covariance steering (mean boundary problem, coupled Riccati
//!   shooting, closed-loop moment propagation).
//! * [`pgcs`] - the proximal-gradient edge connector with EKF error-covariance bookkeeping.
//! * [`brm`] - node sampling, roadmap construction, edge costs and graph search.
//! * [`io`], [`plot`], [`cli`] - file formats, static plots and the command line driver.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod brm;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod pgcs;
pub mod plot;
pub mod sdf;
pub mod steering;

pub use error::{Error, Result};
pub use grid::TimeGrid;
