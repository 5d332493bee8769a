//! The Gaussian gradient flow and its Euler discretization.

use nalgebra::{DMatrix, DVector};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mixture::MixtureDensity;
use crate::quadrature::{TransformedNodes, UnitNodeSet};
use crate::ssm::{AffineGaussianTransition, ObservationModel};

/// Which right-hand side drives the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceForm {
    /// `2I − E[∇V ⊗ (Z−μ)] − E[(Z−μ) ⊗ ∇V]`.
    #[default]
    Stein,
    /// `2I − E[∇²V] Σ − Σ E[∇²V]`.
    Hessian,
}

/// How the likelihood increment `ℓ_k` is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodRule {
    /// `log E_{N(m̄, P̄)}[p(y | x)]` with the rule placed on the predictive.
    Predictive,
    /// The same integral, importance-weighted through the converged posterior
    /// `N(μ, Σ)`. Exact whenever `p(y | x) N(x | m̄, P̄)` is Gaussian.
    #[default]
    PosteriorImportance,
}

/// Step-size policy for one innovation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepControl {
    /// Always start from `step_size`.
    Fixed,
    /// Start from `min(step_size, safety / λ_max)` where `λ_max` is the largest
    /// eigenvalue of `E[∇²V]` under the starting belief.
    CurvatureCapped { safety: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::CurvatureCapped { safety: 0.5 }
    }
}

/// Where the fixed-point iteration of an innovation starts.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WarmStart {
    #[default]
    Predictive,
    /// The previous step's posterior (the predictive at the first step).
    PreviousPosterior,
    /// A fixed belief used at every step.
    Given(GaussianBelief),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Euler step `h`.
    pub step_size: f64,
    pub max_iters: usize,
    /// Convergence threshold on `‖Δm‖_∞ + ‖ΔP‖_∞`.
    pub tol: f64,
    /// Smallest eigenvalue any accepted covariance may have.
    pub jitter: f64,
    pub covariance_form: CovarianceForm,
    pub likelihood: LikelihoodRule,
    pub step_control: StepControl,
    /// How often an innovation may halve its step after detecting divergence.
    pub max_step_shrinks: usize,
    pub warm_start: WarmStart,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_iters: 500,
            tol: 1e-8,
            jitter: 1e-9,
            covariance_form: CovarianceForm::Stein,
            likelihood: LikelihoodRule::PosteriorImportance,
            step_control: StepControl::default(),
            max_step_shrinks: 20,
            warm_start: WarmStart::Predictive,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if let StepControl::CurvatureCapped { safety } = self.step_control {
            if !(safety > 0.0) {
                return Err(Error::Config(format!("step safety must be > 0, got {safety}")));
            }
        }
        Ok(())
    }
}

/// The log-prior part of the potential.
#[derive(Debug, Clone)]
pub enum PriorTerm {
    /// `N(x | mean, L Lᵀ)`.
    Gaussian {
        mean: DVector<f64>,
        chol: DMatrix<f64>,
        precision: DMatrix<f64>,
    },
    Mixture(MixtureDensity),
}

impl PriorTerm {
    pub fn gaussian(belief: &GaussianBelief) -> Result<Self> {
        let chol = linalg::cholesky(&belief.cov, "predictive covariance")?;
        let precision = linalg::inverse_from_cholesky(&chol);
        Ok(PriorTerm::Gaussian {
            mean: belief.mean.clone(),
            chol,
            precision,
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        match self {
            PriorTerm::Gaussian { mean, chol, .. } => linalg::gaussian_logpdf_chol(x, mean, chol),
            PriorTerm::Mixture(q) => q.log_density(x),
        }
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            PriorTerm::Gaussian { mean, precision, .. } => -(precision * (x - mean)),
            PriorTerm::Mixture(q) => q.grad(x),
        }
    }

    fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            PriorTerm::Gaussian { precision, .. } => -precision.clone(),
            PriorTerm::Mixture(q) => q.hess(x),
        }
    }
}

/// `V(x) = −log p(y | x) − log prior(x)`, the negative unnormalized log
/// posterior of one innovation.
#[derive(Debug, Clone)]
pub struct Potential<'a> {
    pub observation: &'a dyn ObservationModel,
    pub y: &'a DVector<f64>,
    pub prior: PriorTerm,
}

impl<'a> Potential<'a> {
    pub fn new(
        observation: &'a dyn ObservationModel,
        y: &'a DVector<f64>,
        predictive: &GaussianBelief,
    ) -> Result<Self> {
        Ok(Self {
            observation,
            y,
            prior: PriorTerm::gaussian(predictive)?,
        })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        -self.observation.log_density(self.y, x) - self.prior.log_density(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.observation.grad_x(self.y, x) - self.prior.grad(x)
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        -self.observation.hess_x(self.y, x) - self.prior.hess(x)
    }
}

fn blow_up(belief: &GaussianBelief, err: Error) -> Error {
    match err {
        Error::NonFiniteIntegrand { node } => Error::FlowBlowUp(format!(
            "non-finite integrand at {node:?} for belief mean {:?}, cov {:?}",
            belief.mean.as_slice(),
            belief.cov.as_slice()
        )),
        other => other,
    }
}

fn check_finite_vec(v: &DVector<f64>, j: usize, nodes: &TransformedNodes) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteIntegrand {
            node: nodes.points[j].iter().copied().collect(),
        })
    }
}

/// `(F_m, F_P)` on already transformed nodes.
pub(crate) fn flow_rhs_on(
    nodes: &TransformedNodes,
    potential: &Potential<'_>,
    form: CovarianceForm,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = nodes.factor.nrows();
    let mut fm = DVector::zeros(d);
    let mut acc = DMatrix::zeros(d, d);
    for (j, (x, &w)) in nodes.points.iter().zip(&nodes.weights).enumerate() {
        let g = potential.grad(x);
        check_finite_vec(&g, j, nodes)?;
        fm.axpy(-w, &g, 1.0);
        match form {
            CovarianceForm::Stein => acc.ger(w, &g, &nodes.offsets[j], 1.0),
            CovarianceForm::Hessian => {
                let h = potential.hess(x);
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteIntegrand {
                        node: x.iter().copied().collect(),
                    });
                }
                acc += h * w;
            }
        }
    }
    let fp = match form {
        CovarianceForm::Stein => {
            let mut fp = DMatrix::identity(d, d) * 2.0 - &acc - acc.transpose();
            linalg::symmetrize(&mut fp);
            fp
        }
        CovarianceForm::Hessian => {
            let cov = &nodes.factor * nodes.factor.transpose();
            let ec = &acc * &cov;
            linalg::symmetrized(DMatrix::identity(d, d) * 2.0 - &ec - ec.transpose())
        }
    };
    if fm.iter().chain(fp.iter()).any(|v| !v.is_finite()) {
        return Err(Error::FlowBlowUp("non-finite flow right-hand side".into()));
    }
    Ok((fm, fp))
}

/// Mean and covariance velocities of the Gaussian gradient flow, with the
/// default (Stein) covariance form.
pub fn flow_rhs(
    belief: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    flow_rhs_with(belief, potential, rule, CovarianceForm::Stein)
}

pub fn flow_rhs_with(
    belief: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    form: CovarianceForm,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_rule(belief, rule)?;
    let nodes = rule.transform(belief)?;
    flow_rhs_on(&nodes, potential, form).map_err(|e| blow_up(belief, e))
}

pub(crate) fn check_rule(belief: &GaussianBelief, rule: &UnitNodeSet) -> Result<()> {
    if belief.dim() != rule.dim() {
        return Err(Error::Dimension(format!(
            "belief has dimension {}, rule {}",
            belief.dim(),
            rule.dim()
        )));
    }
    Ok(())
}

/// True when every eigenvalue of `p` exceeds `floor`.
pub(crate) fn above_floor(p: &DMatrix<f64>, floor: f64) -> bool {
    let mut shifted = p.clone();
    for i in 0..p.nrows() {
        shifted[(i, i)] -= floor;
    }
    nalgebra::Cholesky::new(shifted).is_some()
}

/// One Euler step of length `h`, halving the covariance increment until the
/// result clears the jitter floor.
pub(crate) fn euler_step(
    belief: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    h: f64,
    config: &FlowConfig,
) -> Result<GaussianBelief> {
    let nodes = rule.transform(belief)?;
    let (fm, fp) = flow_rhs_on(&nodes, potential, config.covariance_form)
        .map_err(|e| blow_up(belief, e))?;
    let mean = &belief.mean + &fm * h;
    let mut step = h;
    for _ in 0..=30 {
        let cov = linalg::symmetrized(&belief.cov + &fp * step);
        if above_floor(&cov, config.jitter) {
            return Ok(GaussianBelief { mean, cov });
        }
        step *= 0.5;
    }
    Err(Error::StepFailure { halvings: 30 })
}

/// `I(m, P) = (m + h F_m, P + h F_P)`, symmetrized, with covariance step
/// halving (at most 30 times) to keep the smallest eigenvalue above `jitter`.
pub fn fixed_point_step(
    belief: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<GaussianBelief> {
    check_rule(belief, rule)?;
    euler_step(belief, potential, rule, config.step_size, config)
}

/// `m̄ = A m + b`, `P̄ = A P Aᵀ + Q`.
pub fn predict(belief: &GaussianBelief, transition: &AffineGaussianTransition) -> GaussianBelief {
    let a = &transition.a;
    GaussianBelief {
        mean: a * &belief.mean + &transition.b,
        cov: linalg::symmetrized(a * &belief.cov * a.transpose() + &transition.q),
    }
}
