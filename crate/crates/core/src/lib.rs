//! Multi-level neural network solver for linear boundary-value problems.
//!
//! A first network is trained to minimise the strong-form residual of the
//! problem. Each following network solves the same problem for the scaled
//! residual of the current composite approximation, and the composite
//! `ũ = Σ_i ũ_i / Π_{j≤i} μ_j` accumulates the corrections.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod model;
pub mod multilevel;
pub mod optimize;
pub mod problems;
pub mod scaling;

pub use autodiff::{extended_forward, CollocationLoss, DerivativeBundle, Evaluator, LossReport};
pub use error::{Error, Result};
pub use grid::PointSet;
pub use model::{
    trial_value, xavier_init, Activation, AffineLift, ArchitectureKind, NetworkSpec, ParamVector,
};
pub use multilevel::{
    collocation_grid, error_metrics, run_multilevel, CompositeSolution, Correction, ErrorMetrics,
    LevelConfig, LevelOutcome, MultilevelRun, RunOptions,
};
pub use optimize::{
    adam_run, lbfgs_run, two_phase_train, AdamConfig, LbfgsConfig, Phase, StepInfo, StepMetrics,
    TrainRecord,
};
pub use scaling::{elm_estimate_scale, solve_least_squares, ElmBasis, ScaleEstimate};
pub use problems::{LinearOperator, ProblemDef, ProblemKind};
