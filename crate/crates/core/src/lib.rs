//! Score-distillation estimators on Gaussian-mixture diffusion targets.
//!
//! Every target here is a Gaussian mixture, so each noised marginal, score and
//! noise predictor has a closed form. The estimators, the point optimizer and
//! the Monte-Carlo diagnostics therefore run against exact quantities.

pub mod analysis;
pub mod config;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gmm;
pub mod moments;
pub mod schedule;
pub mod simulator;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{Result, SsdError};
pub use estimators::{
    DistillationTarget, EstimatorKind, EstimatorOutput, EstimatorSpec, NoisedTarget, SsdBranch, VarianceReduction,
};
pub use gmm::{GaussianComponent, GaussianMixture};
pub use schedule::{DiffusionSchedule, NoisySample, ScheduleKind, Timestep};
pub use simulator::{OptimizerConfig, Trajectory, UpdateRule, Weighting};
