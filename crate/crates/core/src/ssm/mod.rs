//! State-space models with affine Gaussian transitions.
//!
//! A [`ModelDefinition`] bundles the prior on `x_0`, the transition schedule and
//! an [`ObservationModel`]. Parameterized collections of models implement
//! [`ModelFamily`], which also exposes the parameter sensitivities needed by
//! implicit differentiation.

mod catalog;
mod simulate;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::baselines::pf::{ParticleModel, ScalarParticleModel};
use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::estimate::transform::ComponentMap;
use crate::linalg;

pub use catalog::{
    make_bimodal_model, make_lgssm_model, make_sv_model, BimodalFamily, BimodalObservation,
    LgssmFamily, LgssmParam, LgssmSpec, LinearGaussianObservation, SvFamily, SvObservation,
    SVParameters,
};
pub use simulate::{simulate, SimulationTrace};

/// `x_k | x_{k-1} ~ N(A x_{k-1} + b, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGaussianTransition {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl AffineGaussianTransition {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        linalg::check_square(&a, d, "A")?;
        linalg::check_len(&b, d, "b")?;
        linalg::check_square(&q, d, "Q")?;
        if a.iter().chain(b.iter()).chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("transition has non-finite entries".into()));
        }
        if linalg::asymmetry(&q) > 1e-12 {
            return Err(Error::Config("Q is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&q) < -1e-12 {
            return Err(Error::Config("Q is not positive semi-definite".into()));
        }
        Ok(Self { a, b, q })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// How the transition varies with the step index.
#[derive(Clone)]
pub enum TransitionSchedule {
    Constant(AffineGaussianTransition),
    Varying(Arc<dyn Fn(usize) -> AffineGaussianTransition + Send + Sync>),
}

impl fmt::Debug for TransitionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionSchedule::Constant(t) => f.debug_tuple("Constant").field(t).finish(),
            TransitionSchedule::Varying(_) => f.write_str("Varying(..)"),
        }
    }
}

/// Observation density `h(y | x)` with analytic state derivatives.
pub trait ObservationModel: Send + Sync + fmt::Debug {
    fn obs_dim(&self) -> usize;
    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64;
    fn grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    fn hess_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;
}

/// Derivatives of the observation density with respect to family parameters.
pub trait ObservationSensitivity: Send + Sync + fmt::Debug {
    /// `∂ log h / ∂θ`, one entry per parameter.
    fn dtheta_log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// `∂ (∇_x log h) / ∂θ` as a `d × p` matrix.
    fn dtheta_grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Ingredients of an extended Kalman filter update.
pub trait EkfLinearization: Send + Sync + fmt::Debug {
    fn obs_mean(&self, x: &DVector<f64>) -> DVector<f64>;
    fn obs_mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn obs_noise_cov(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `y | x ~ N(H x + c, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelDefinition {
    pub name: String,
    pub prior: GaussianBelief,
    pub transition: TransitionSchedule,
    pub observation: Arc<dyn ObservationModel>,
    /// Present when the observation is affine Gaussian (exact Kalman filtering).
    pub linear_observation: Option<LinearObservation>,
    pub linearization: Option<Arc<dyn EkfLinearization>>,
    pub theta: Vec<(String, f64)>,
}

impl ModelDefinition {
    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.obs_dim()
    }

    /// Transition from step `k` to `k + 1`.
    pub fn transition_at(&self, k: usize) -> Cow<'_, AffineGaussianTransition> {
        match &self.transition {
            TransitionSchedule::Constant(t) => Cow::Borrowed(t),
            TransitionSchedule::Varying(f) => Cow::Owned(f(k)),
        }
    }

    pub fn theta_value(&self, name: &str) -> Option<f64> {
        self.theta.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub(crate) fn check_observations(&self, observations: &[DVector<f64>]) -> Result<()> {
        if observations.is_empty() {
            return Err(Error::Config("observation sequence is empty".into()));
        }
        let m = self.obs_dim();
        if let Some(bad) = observations.iter().position(|y| y.len() != m) {
            return Err(Error::Dimension(format!(
                "observation {} has length {}, expected {m}",
                bad + 1,
                observations[bad].len()
            )));
        }
        Ok(())
    }
}

/// Worst relative disagreement between analytic and finite-difference
/// derivatives at one point. Errors are scaled by `max(1, |fd|)`.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeCheck {
    pub grad_error: f64,
    pub hess_error: f64,
}

/// Compares `grad_x` with central differences of `log_density`, and `hess_x`
/// with central differences of `grad_x`.
pub fn derivative_self_check(
    obs: &dyn ObservationModel,
    y: &DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> DerivativeCheck {
    let d = x.len();
    let grad = obs.grad_x(y, x);
    let hess = obs.hess_x(y, x);
    let mut grad_error: f64 = 0.0;
    let mut hess_error: f64 = 0.0;
    for i in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let fd = (obs.log_density(y, &xp) - obs.log_density(y, &xm)) / (2.0 * step);
        grad_error = grad_error.max((grad[i] - fd).abs() / fd.abs().max(1.0));
        let gp = obs.grad_x(y, &xp);
        let gm = obs.grad_x(y, &xm);
        for j in 0..d {
            let fd = (gp[j] - gm[j]) / (2.0 * step);
            hess_error = hess_error.max((hess[(j, i)] - fd).abs() / fd.abs().max(1.0));
        }
    }
    DerivativeCheck {
        grad_error,
        hess_error,
    }
}

/// Derivatives of `(A, b, Q)` with respect to one parameter.
#[derive(Debug, Clone)]
pub struct TransitionDerivative {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// Parameter derivatives of every model ingredient, one entry per parameter.
#[derive(Debug, Clone)]
pub struct ModelSensitivity {
    pub prior_mean: Vec<DVector<f64>>,
    pub prior_cov: Vec<DMatrix<f64>>,
    pub transition: Vec<TransitionDerivative>,
    /// `None` when the observation density does not depend on the parameters.
    pub observation: Option<Arc<dyn ObservationSensitivity>>,
}

impl ModelSensitivity {
    pub fn n_params(&self) -> usize {
        self.prior_mean.len()
    }

    pub(crate) fn zeros(d: usize, p: usize) -> Self {
        Self {
            prior_mean: vec![DVector::zeros(d); p],
            prior_cov: vec![DMatrix::zeros(d, d); p],
            transition: vec![
                TransitionDerivative {
                    a: DMatrix::zeros(d, d),
                    b: DVector::zeros(d),
                    q: DMatrix::zeros(d, d),
                };
                p
            ],
            observation: None,
        }
    }
}

/// A parameterized collection of models `θ ↦ ModelDefinition`.
pub trait ModelFamily: Send + Sync {
    fn name(&self) -> &str;
    fn param_names(&self) -> Vec<String>;
    fn build(&self, theta: &[f64]) -> Result<ModelDefinition>;
    fn sensitivity(&self, theta: &[f64]) -> Result<ModelSensitivity>;
    /// Maps to an unconstrained space, one per parameter.
    fn transforms(&self) -> Vec<ComponentMap>;

    /// Scalar-state particle representation; the default requires `d = 1`.
    fn particle_model(&self, theta: &[f64]) -> Result<Box<dyn ParticleModel>> {
        let model = self.build(theta)?;
        Ok(Box::new(ScalarParticleModel::from_definition(&model)?))
    }

    fn param_index(&self, name: &str) -> Result<usize> {
        self.param_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("family {} has no parameter {name}", self.name())))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        let p = self.param_names().len();
        if theta.len() != p {
            return Err(Error::Dimension(format!(
                "family {} takes {p} parameters, got {}",
                self.name(),
                theta.len()
            )));
        }
        Ok(())
    }
}
