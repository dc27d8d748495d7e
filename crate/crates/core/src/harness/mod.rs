//! Configuration-driven experiment harness: presets, runners and
//! self-describing CSV/JSON outputs.

pub mod config;
pub mod output;
pub mod presets;
pub mod run;

pub use config::{realization_seed, ExperimentConfig, ExperimentKind};
pub use output::{Cell, ResultTable};
pub use presets::{preset, preset_names};
pub use run::{averaged_estimate_once, run_experiment, ExperimentOutcome};
