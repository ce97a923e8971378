//! Experiment front-end: dataset generation, source training, adaptation
//! runs, the five-method comparison and the classification analog. Every
//! command is a pure function of the config and the files under `out_dir`.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
