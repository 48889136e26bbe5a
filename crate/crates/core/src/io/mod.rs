//! Configuration files, checkpoints and metrics logs.


pub mod checkpoint;
pub mod config;
pub mod metrics;
