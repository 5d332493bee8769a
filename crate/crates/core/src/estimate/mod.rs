//! Likelihood evaluation, gradients and maximum-likelihood estimation.

pub mod implicit;
pub mod loglik;
pub mod mle;
pub mod optimize;
pub mod stats;
pub mod sweep;
pub mod transform;

pub use implicit::{
    finite_difference_gradient, implicit_gradient, relative_error, GradientMethod, GradientOptions,
    GradientReport,
};
pub use loglik::{loglik, run_filter, FilterKind, LoglikSettings};
pub use mle::{mle, mle_with_transform, pf_median_estimate, MleConfig, MleIterate, MleResult, SubtrialEstimate};
pub use optimize::{maximize, BfgsConfig, Iterate, OptimResult, StopReason};
pub use stats::{median, trial_statistics, TrialStatistics};
pub use sweep::{linear_grid, normalize, sweep_parameter, sweep_rho, SweepResult};
pub use transform::{ComponentMap, ParameterTransform};
