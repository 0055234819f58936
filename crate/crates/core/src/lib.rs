//! Patch-based U-net restoration of 2D seismic shot gathers.

pub mod cli;
pub mod corrupt;
pub mod error;
pub mod evalkit;
pub mod neuralnet;
pub mod patchwork;
pub mod restore;
pub mod seisdata;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
