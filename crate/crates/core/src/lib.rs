//! Randomized penalized BSDEs for optimal control: model, simulation, solver and a
//! finite-difference reference.

pub mod bsde;
pub mod expr;
pub mod hjb;
pub mod io;
pub mod problem;
pub mod randomization;
pub mod regression;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod summary;

pub use bsde::{
    dpp_residual, dual_value_check, optimal_intensity, run_constrained_limit, solve_constrained_limit,
    solve_penalized_bsde, BsdeError, BsdeSolution, PenaltyScheme, Schedule, SolverOptions, ValueCertificate,
};
pub use problem::{ControlSpace, JumpMeasure, ProblemSpec, Regime};
pub use randomization::{FeedbackTable, IntensityControl};
pub use regression::RegressionBasis;
pub use sim::{PathEnsemble, SimOptions, TimeGrid};
pub use summary::PathSummarySpec;
