//! Gaussian and Gaussian-mixture filtering for nonlinear state-space models by
//! Wasserstein gradient flows.
//!
//! The measurement update of each filter step is a KL minimization over
//! Gaussians (or equally weighted Gaussian mixtures), solved by a gradient
//! flow whose expectations are replaced by quadrature. The prediction step is
//! exact for affine Gaussian transitions.
//!
//! ```
//! use vgf_core::{filter, simulate, make_sv_model, FlowConfig, QuadratureRule, SVParameters};
//!
//! let model = make_sv_model(SVParameters::reference()).unwrap();
//! let trace = simulate(&model, 50, 1).unwrap();
//! let run = filter(&model, &trace.observations, &QuadratureRule::default(), &FlowConfig::default()).unwrap();
//! assert_eq!(run.steps(), 50);
//! assert!(run.loglik.is_finite());
//! ```

pub mod baselines;
pub mod belief;
pub mod error;
pub mod estimate;
pub mod io;
pub mod linalg;
pub mod mixture;
pub mod quadrature;
pub mod ssm;
pub mod vwf;

pub use baselines::{bootstrap_pf, ekf_filter, kalman_filter, ParticleModel, SvParticleModel};
pub use belief::GaussianBelief;
pub use error::{Error, Result};
pub use estimate::{
    implicit_gradient, loglik, mle, sweep_rho, FilterKind, GradientReport, LoglikSettings,
    MleConfig, MleResult, ParameterTransform, SweepResult,
};
pub use mixture::{mixture_filter, MixtureBelief, MixtureConfig, MixtureRun};
pub use quadrature::{QuadratureKind, QuadratureRule, UnitNodeSet};
pub use ssm::{
    make_bimodal_model, make_lgssm_model, make_sv_model, simulate, BimodalFamily, LgssmFamily,
    LgssmSpec, ModelDefinition, ModelFamily, ObservationModel, SVParameters, SimulationTrace,
    SvFamily,
};
pub use vwf::{filter, FilterRun, FlowConfig};
