//! Domain-adaptive detection transformer at desk scale.

pub mod ablation;
pub mod cli;
pub mod cpa;
pub mod das;
pub mod detector;
pub mod eval;
pub mod error;
pub mod params;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
