use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::{bootstrap_pf, ekf_filter, kalman_filter};
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;
use crate::ssm::ModelFamily;
use crate::vwf::{self, FlowConfig, FilterRun};

/// Filters that can score a parameter value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Vwf,
    Ekf,
    Pf,
    Kalman,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Vwf => "vwf",
            FilterKind::Ekf => "ekf",
            FilterKind::Pf => "pf",
            FilterKind::Kalman => "kalman",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vwf" => Ok(FilterKind::Vwf),
            "ekf" => Ok(FilterKind::Ekf),
            "pf" => Ok(FilterKind::Pf),
            "kalman" => Ok(FilterKind::Kalman),
            other => Err(Error::Config(format!("unknown filter kind {other}"))),
        }
    }
}

/// Everything besides `θ` that a likelihood evaluation depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglikSettings {
    pub rule: QuadratureRule,
    pub flow: FlowConfig,
    pub particles: usize,
    pub seed: u64,
}

impl Default for LoglikSettings {
    fn default() -> Self {
        Self {
            rule: QuadratureRule::default(),
            flow: FlowConfig::default(),
            particles: 500,
            seed: 0,
        }
    }
}

/// Runs the chosen filter at `θ`.
pub fn run_filter(
    family: &dyn ModelFamily,
    theta: &[f64],
    observations: &[DVector<f64>],
    kind: FilterKind,
    settings: &LoglikSettings,
) -> Result<FilterRun> {
    let run = || -> Result<FilterRun> {
        if observations.is_empty() {
            return Err(Error::Config("observation sequence is empty".into()));
        }
        match kind {
            FilterKind::Vwf => {
                let model = family.build(theta)?;
                vwf::filter(&model, observations, &settings.rule, &settings.flow)
            }
            FilterKind::Ekf => ekf_filter(&family.build(theta)?, observations),
            FilterKind::Kalman => kalman_filter(&family.build(theta)?, observations),
            FilterKind::Pf => {
                let pm = family.particle_model(theta)?;
                bootstrap_pf(pm.as_ref(), observations, settings.particles, settings.seed)
            }
        }
    };
    run().map_err(|e| e.at_theta(theta))
}

/// Marginal log-likelihood `ℓ(θ)` from the chosen filter.
pub fn loglik(
    family: &dyn ModelFamily,
    theta: &[f64],
    observations: &[DVector<f64>],
    kind: FilterKind,
    settings: &LoglikSettings,
) -> Result<f64> {
    Ok(run_filter(family, theta, observations, kind, settings)?.loglik)
}
