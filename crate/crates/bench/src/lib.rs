//! Benchmark harness: dataset ingestion, scoring, the end-to-end runner, and
//! the `ba2` command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod runner;
pub mod scoring;
