//! Dataset generation and loading, experiment configuration, multi-seed
//! runs, ablation sweeps and the verification suites behind the `stag`
//! command-line tool.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod verify;

pub use config::ExperimentConfig;
