//! Experiment runner for the XGM simulator.
//!
//! A run is one trajectory at one grid point and one seed. [`runs`] expands
//! the grid and executes runs in parallel, [`output`] writes the CSV/JSON
//! artefacts and [`experiments`] adds the per-kind post-processing.

pub mod config;
pub mod experiments;
pub mod output;
pub mod runs;

pub use config::{ConfigError, Engine, ExperimentConfig, ExperimentKind, InitKind};

/// Version string baked in at build time (`<crate>+<git describe>`).
pub const VERSION: &str = env!("XGM_VERSION");
