//! Synthetic tasks, run orchestration and reports for the `hyperadapt` CLI.

pub mod config;
pub mod report;
pub mod run;
pub mod task;
