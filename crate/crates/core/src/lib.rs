//! Penalized likelihood regression with randomized, noisy and missing
//! covariates, fitted by quadrature EM in a reproducing kernel Hilbert space.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cli;
pub mod covariate;
pub mod em;
pub mod error;
pub mod expfam;
pub mod kernel;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod tuning;

pub use error::{Error, Result};
pub use expfam::Family;
pub use kernel::Kernel;
