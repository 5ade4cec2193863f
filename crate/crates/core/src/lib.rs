//! Empirical-risk-minimization model selection: the selector, closed-form
//! oracle bounds, synthetic problems with exact population quantities, and a
//! Monte Carlo harness that checks the bounds.

pub mod bounds;
pub mod cli;
pub mod concentration;
pub mod erm;
pub mod experiments;
pub mod margins;
pub mod error;
pub mod numeric;
pub mod problems;
pub mod rng;

pub use error::{Error, Result};
