use thiserror::Error;

/// Errors raised by the filtering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("quadrature rule infeasible: {nodes} nodes exceeds cap of {cap}")]
    RuleTooLarge { nodes: u128, cap: usize },

    #[error("non-finite integrand at node {node:?}")]
    NonFiniteIntegrand { node: Vec<f64> },

    #[error("gradient flow blew up: {0}")]
    FlowBlowUp(String),

    #[error("covariance step failed after {halvings} halvings")]
    StepFailure { halvings: usize },

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("all particle weights vanished at step {step}")]
    ParticleDegeneracy { step: usize },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("at theta = {theta:?}: {source}")]
    AtTheta {
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_theta(self, theta: &[f64]) -> Self {
        Error::AtTheta {
            theta: theta.to_vec(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Dimension(_) => true,
            Error::AtStep { source, .. } | Error::AtTheta { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
