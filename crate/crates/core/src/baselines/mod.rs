//! Comparison filters: exact Kalman, extended Kalman and a bootstrap particle
//! filter. All return a [`crate::vwf::FilterRun`].

mod kalman;
pub mod pf;

pub use kalman::{ekf_filter, ekf_filter_with, kalman_filter};
pub use pf::{bootstrap_pf, ParticleModel, ScalarParticleModel, SvParticleModel};
