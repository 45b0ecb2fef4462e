//! File formats, run directories, and the `coar` command line.

pub mod cli;
pub mod evals;
pub mod persistence;
pub mod render;
pub mod rundir;
