//! Std companion to `sia-core`: datasets, file formats, training loop,
//! evaluation, and the command-line interface.

pub mod config;
pub mod container;
pub mod dataset;
pub mod evalrun;
pub mod model;
pub mod train;
pub mod wav;
