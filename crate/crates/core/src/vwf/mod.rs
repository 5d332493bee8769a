//! Uni-modal variational filtering by Wasserstein gradient flow.
//!
//! Each innovation minimizes `KL(N(μ, Σ) ‖ posterior)` by integrating the
//! Gaussian flow
//!
//! ```text
//! dμ/dt = −E[∇V(Z)]
//! dΣ/dt = 2I − E[∇V(Z) (Z−μ)ᵀ] − E[(Z−μ) ∇V(Z)ᵀ]
//! ```
//!
//! with explicit Euler steps until the update stalls. The converged belief is a
//! fixed point of the Euler map, which is what [`crate::estimate`]
//! differentiates through.

mod filter;
mod flow;
mod innovate;

pub use filter::{filter, filter_with_nodes, FilterRun};
pub use flow::{
    fixed_point_step, flow_rhs, flow_rhs_with, predict, CovarianceForm, FlowConfig,
    LikelihoodRule, Potential, PriorTerm, StepControl, WarmStart,
};
pub use innovate::{
    innovate, innovate_from, loglik_increment, loglik_increment_posterior, Innovation,
};

pub(crate) use flow::{above_floor, check_rule};
pub(crate) use innovate::{
    initial_step, posterior_loglik, predictive_loglik, update_direction, UpdateMonitor, Verdict,
};

#[cfg(test)]
pub(crate) mod tests_support {
    pub(crate) use super::flow::tests::FlatObservation;
}
