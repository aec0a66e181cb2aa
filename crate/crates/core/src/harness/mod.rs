//! Experiment orchestration: configuration, replica farming, reports,
//! statistics and the acceptance presets.

pub mod stats;
pub mod config;
pub mod experiment;
pub mod report;
pub mod verify;
