//! Stabilizing feedback synthesis from minimum restraint functions, with
//! sampling and Euler simulation and numerical certification of stability
//! and cost bounds.

// `!(a > b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod certify;
pub mod cli;
pub mod error;
pub mod euler;
pub mod feedback;
pub mod hamiltonian;
pub mod kl;
pub mod mrf;
pub mod nhi;
pub mod partition;
pub mod regularize;
pub mod sampling;
pub mod simulate;
pub mod system;
pub mod systems;

pub use error::{Error, Result};
