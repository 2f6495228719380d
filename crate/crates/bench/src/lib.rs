//! Problem zoo, experiment configuration and the pipeline runner behind the `rbsde` binary.

pub mod config;
pub mod experiment;
pub mod zoo;

pub use config::{ConfigError, ExperimentConfig, Resolved, StageKind};
pub use experiment::{run_experiment, Outcome, Report, EXIT_CONFIG, EXIT_INVARIANT, EXIT_PASS};
pub use zoo::{zoo_list, zoo_problem, ZooProblem};
