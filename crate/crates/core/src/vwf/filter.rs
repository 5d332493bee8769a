use nalgebra::DVector;

use super::flow::{predict, FlowConfig, LikelihoodRule, Potential, WarmStart};
use super::innovate::{innovate_from, posterior_loglik, predictive_loglik};
use crate::belief::GaussianBelief;
use crate::error::Result;
use crate::quadrature::{QuadratureRule, UnitNodeSet};
use crate::ssm::ModelDefinition;

/// Per-step output of a Gaussian filter. Index `k − 1` holds step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub filtered: Vec<GaussianBelief>,
    pub predicted: Vec<GaussianBelief>,
    pub loglik: f64,
    pub increments: Vec<f64>,
    pub iters_per_step: Vec<usize>,
    pub converged: Vec<bool>,
}

impl FilterRun {
    pub(crate) fn with_capacity(k: usize) -> Self {
        Self {
            filtered: Vec::with_capacity(k),
            predicted: Vec::with_capacity(k),
            loglik: 0.0,
            increments: Vec::with_capacity(k),
            iters_per_step: Vec::with_capacity(k),
            converged: Vec::with_capacity(k),
        }
    }

    pub(crate) fn push(
        &mut self,
        predicted: GaussianBelief,
        filtered: GaussianBelief,
        increment: f64,
        iters: usize,
        converged: bool,
    ) {
        self.predicted.push(predicted);
        self.filtered.push(filtered);
        self.increments.push(increment);
        self.loglik += increment;
        self.iters_per_step.push(iters);
        self.converged.push(converged);
    }

    pub fn steps(&self) -> usize {
        self.filtered.len()
    }

    pub fn converged_steps(&self) -> usize {
        self.converged.iter().filter(|c| **c).count()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|c| *c)
    }
}

/// The uni-modal Wasserstein gradient-flow filter.
///
/// For `k = 1..K`: predict through the transition from step `k − 1`, compute
/// the likelihood increment, and innovate by fixed-point iteration of the
/// Euler map. One node set is shared by every integral.
pub fn filter(
    model: &ModelDefinition,
    observations: &[DVector<f64>],
    rule: &QuadratureRule,
    config: &FlowConfig,
) -> Result<FilterRun> {
    let nodes = rule.build(model.dim())?;
    filter_with_nodes(model, observations, &nodes, config)
}

pub fn filter_with_nodes(
    model: &ModelDefinition,
    observations: &[DVector<f64>],
    nodes: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<FilterRun> {
    model.check_observations(observations)?;
    config.validate()?;
    let obs = model.observation.as_ref();
    let mut run = FilterRun::with_capacity(observations.len());
    let mut belief = model.prior.clone();
    for (i, y) in observations.iter().enumerate() {
        let k = i + 1;
        let step = || -> Result<_> {
            let pred = predict(&belief, &model.transition_at(k - 1));
            let potential = Potential::new(obs, y, &pred)?;
            let start = match &config.warm_start {
                WarmStart::Predictive => &pred,
                WarmStart::PreviousPosterior if k > 1 => &belief,
                WarmStart::PreviousPosterior => &pred,
                WarmStart::Given(b) => b,
            };
            let inn = innovate_from(start, &potential, nodes, config)?;
            let inc = match config.likelihood {
                LikelihoodRule::Predictive => predictive_loglik(&pred, y, obs, nodes)?,
                LikelihoodRule::PosteriorImportance => {
                    posterior_loglik(&pred, &inn.belief, y, obs, nodes)?
                }
            };
            Ok((pred, inn, inc))
        };
        let (pred, inn, inc) = step().map_err(|e| e.at_step(k))?;
        belief = inn.belief.clone();
        run.push(pred, inn.belief, inc, inn.iterations, inn.converged);
    }
    Ok(run)
}
