//! Training runs, checkpoints, configuration and routing traces.

pub mod checkpoint;
pub mod config;
pub mod schedule;
pub mod trace;
pub mod train;
