//! Learning dynamics of temporal-difference value estimation at desk scale.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod mdp;
pub mod spectral;
pub mod tabular;
pub mod kernel;
pub mod net;
pub mod approx;
pub mod interference;
pub mod distill;
pub mod optim;

pub use error::{Error, Result};
