//! Extrinsic calibration of a 2D laser rangefinder and a camera from
//! observations of a V-shaped triangular target.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrator;
pub mod constraints;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod io;
pub mod rotation_solver;
pub mod synth;

#[cfg(test)]
mod test_fixtures;

pub use error::{CalibError, Result};
