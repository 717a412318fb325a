//! Data-driven dynamic output-feedback design for nonlinear discrete-time
//! SISO systems.
//!
//! The pipeline runs short open-loop experiments on a plant, stacks the
//! measured input/output windows into data matrices, solves a semidefinite
//! program for a gain `kappa`, certifies local stability with a quadratic
//! Lyapunov function computed from the same data, and closes the loop
//! through a dead-beat observer built from two delay chains.

// Links the system OpenBLAS used by the PSD cone kernels.
use openblas_src as _;

pub mod controller;
pub mod dictionary;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod pipeline;
pub mod plant;
pub mod roa;
pub mod solver;
pub mod synthesis;

pub use error::{Error, Result};
