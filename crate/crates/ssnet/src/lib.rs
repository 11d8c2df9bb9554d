//! File formats, the training and evaluation drivers, gradient-check cases
//! and benchmarks for `ssnet-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod pnm;
pub mod train;

pub use error::{Error, Result};
