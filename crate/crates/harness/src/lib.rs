//! Benchmark harness and command-line tools around `vla-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod sweep;
pub mod verify;
