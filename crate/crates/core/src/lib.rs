//! Bandwidth matrix selection for kernel estimates of density level sets and
//! highest density regions in the plane.
//!
//! The crate evaluates Gaussian kernel density estimates and their derivatives,
//! extracts level curves, approximates the symmetric-difference risk of plug-in
//! level-set and HDR estimators, and minimizes pilot estimates of that risk over
//! scalar, diagonal or full bandwidth matrices. A Monte Carlo harness measures the
//! true risk under known Gaussian mixtures.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod contour;
pub mod density_models;
pub mod error;
pub mod field;
pub mod io;
pub mod kde;
pub mod levels;
pub mod montecarlo;
pub mod optimize;
pub mod pilot;
pub mod risk;
pub mod selector;

pub use error::{Error, Result};
