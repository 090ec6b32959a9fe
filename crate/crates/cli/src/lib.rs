//! Experiment runner around the `fedpick` library: configuration files,
//! training runs, the Fisher/KNN feature probe and mask diagnostics.

pub mod commands;
pub mod config;

pub use config::Config;
