use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::implicit::{implicit_gradient, GradientMethod, GradientOptions};
use super::loglik::{loglik, FilterKind, LoglikSettings};
use super::optimize::{maximize, BfgsConfig, StopReason};
use super::stats::median;
use super::transform::ParameterTransform;
use crate::error::{Error, Result};
use crate::ssm::ModelFamily;

#[derive(Debug, Clone, PartialEq)]
pub struct MleConfig {
    pub settings: LoglikSettings,
    pub optimizer: BfgsConfig,
    pub gradient: GradientOptions,
    /// Central-difference step on the unconstrained scale for filters
    /// without an implicit gradient.
    pub fd_step: f64,
    /// Same, for the particle filter (common random numbers).
    pub pf_fd_step: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            settings: LoglikSettings::default(),
            optimizer: BfgsConfig::default(),
            gradient: GradientOptions::default(),
            fd_step: 1e-5,
            pf_fd_step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MleIterate {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Gradient sup-norm on the unconstrained scale.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MleResult {
    pub theta_hat: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
    pub trace: Vec<MleIterate>,
    /// Gradient evaluations that fell back to finite differences, with reasons.
    pub warnings: Vec<String>,
}

fn central_difference<F>(mut f: F, u: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(u.len());
    for i in 0..u.len() {
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += step;
        um[i] -= step;
        g[i] = (f(&up)? - f(&um)?) / (2.0 * step);
    }
    Ok(g)
}

/// Maximum-likelihood estimate with the family's own parameter transform.
pub fn mle(
    family: &dyn ModelFamily,
    theta_init: &[f64],
    observations: &[DVector<f64>],
    kind: FilterKind,
    config: &MleConfig,
) -> Result<MleResult> {
    let transform = ParameterTransform::new(family.transforms());
    mle_with_transform(family, &transform, theta_init, observations, kind, config)
}

/// Maximizes `ℓ(inverse(u))` over the unconstrained `u`. Gradients are
/// implicit for the VWF filter and central differences in `u` otherwise.
pub fn mle_with_transform(
    family: &dyn ModelFamily,
    transform: &ParameterTransform,
    theta_init: &[f64],
    observations: &[DVector<f64>],
    kind: FilterKind,
    config: &MleConfig,
) -> Result<MleResult> {
    family.check_theta(theta_init)?;
    if observations.is_empty() {
        return Err(Error::Config("observation sequence is empty".into()));
    }
    let u0 = transform.forward(theta_init)?;
    let settings = &config.settings;
    let value = |u: &DVector<f64>| -> Result<f64> {
        let theta = transform.inverse(u.as_slice())?;
        loglik(family, &theta, observations, kind, settings)
    };
    let mut warnings = Vec::new();
    let objective = |u: &DVector<f64>, need_grad: bool| -> Result<(f64, Option<DVector<f64>>)> {
        if !need_grad {
            return Ok((value(u)?, None));
        }
        match kind {
            FilterKind::Vwf => {
                let theta = transform.inverse(u.as_slice())?;
                let rep = implicit_gradient(
                    family,
                    &theta,
                    observations,
                    &settings.rule,
                    &settings.flow,
                    &config.gradient,
                )?;
                if rep.method == GradientMethod::FiniteDifference {
                    warnings.extend(rep.warnings.iter().cloned());
                }
                let g = transform.pullback_gradient(u.as_slice(), &rep.gradient);
                Ok((rep.loglik, Some(DVector::from_vec(g))))
            }
            _ => {
                let step = if kind == FilterKind::Pf {
                    config.pf_fd_step
                } else {
                    config.fd_step
                };
                Ok((value(u)?, Some(central_difference(value, u, step)?)))
            }
        }
    };
    let opt = maximize(objective, &u0, &config.optimizer).map_err(|e| e.at_theta(theta_init))?;
    let trace = opt
        .trace
        .iter()
        .map(|it| {
            Ok(MleIterate {
                iteration: it.iteration,
                theta: transform.inverse(&it.x)?,
                loglik: it.value,
                grad_norm: it.grad_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MleResult {
        theta_hat: transform.inverse(&opt.x)?,
        loglik: opt.value,
        converged: opt.converged(),
        stop: opt.stop,
        iterations: opt.iterations,
        trace,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubtrialEstimate {
    /// Componentwise median over the successful sub-trials.
    pub theta_hat: Vec<f64>,
    pub subtrials: Vec<Option<MleResult>>,
}

impl SubtrialEstimate {
    pub fn successes(&self) -> usize {
        self.subtrials.iter().flatten().count()
    }
}

/// Particle-filter MLE repeated with seeds `base_seed, base_seed + 1, …` on
/// the same observations; the estimate is the componentwise median.
pub fn pf_median_estimate(
    family: &dyn ModelFamily,
    theta_init: &[f64],
    observations: &[DVector<f64>],
    config: &MleConfig,
    subtrials: usize,
    base_seed: u64,
) -> Result<SubtrialEstimate> {
    if subtrials == 0 {
        return Err(Error::Config("need at least one sub-trial".into()));
    }
    let runs: Vec<Option<MleResult>> = (0..subtrials as u64)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.settings.seed = base_seed.wrapping_add(i);
            mle(family, theta_init, observations, FilterKind::Pf, &cfg).ok()
        })
        .collect();
    let ok: Vec<&MleResult> = runs.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Degenerate("every particle-filter sub-trial failed".into()));
    }
    let theta_hat = (0..theta_init.len())
        .map(|c| median(&ok.iter().map(|r| r.theta_hat[c]).collect::<Vec<_>>()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Degenerate("sub-trial estimates are not finite".into()))?;
    Ok(SubtrialEstimate {
        theta_hat,
        subtrials: runs,
    })
}
