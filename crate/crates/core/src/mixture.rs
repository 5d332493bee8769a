//! Mixture-of-Gaussians filtering with fixed uniform weights.
//!
//! Component `i` follows
//!
//! ```text
//! dμᵢ/dt = −Eᵢ[r(Z)],            r = ∇log q_t + ∇V
//! dΣᵢ/dt = −Eᵢ[R(Z)] Σᵢ − Σᵢ Eᵢ[R(Z)],   R = ∇²log q_t + ∇²V
//! ```
//!
//! where `q_t` is the current mixture and `Eᵢ` integrates against component
//! `i`. The potential uses the predictive mixture as its prior term.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::quadrature::{QuadratureRule, TransformedNodes, UnitNodeSet};
use crate::ssm::{AffineGaussianTransition, ModelDefinition, ObservationModel};
use crate::vwf::{self, FlowConfig, LikelihoodRule, Potential, PriorTerm, StepControl};
use crate::vwf::{update_direction, UpdateMonitor, Verdict};

/// Equally weighted Gaussian components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBelief {
    pub components: Vec<GaussianBelief>,
}

impl MixtureBelief {
    pub fn new(components: Vec<GaussianBelief>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Config("a mixture needs at least one component".into()));
        };
        let d = first.dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::Dimension("mixture components differ in dimension".into()));
        }
        Ok(Self { components })
    }

    pub fn single(belief: GaussianBelief) -> Self {
        Self {
            components: vec![belief],
        }
    }

    /// Two components at `±offset` sharing `cov`.
    pub fn mirrored(offset: DVector<f64>, cov: nalgebra::DMatrix<f64>) -> Self {
        Self {
            components: vec![
                GaussianBelief {
                    mean: offset.clone(),
                    cov: cov.clone(),
                },
                GaussianBelief { mean: -offset, cov },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.components.len() as f64
    }

    pub fn sup_distance(&self, other: &MixtureBelief) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| a.sup_distance(b))
            .sum()
    }
}

#[derive(Debug, Clone)]
struct DensityComponent {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `log w − ½ log det(2πP)`.
    log_scale: f64,
}

/// `log q`, `∇log q` and `∇²log q` for an equally weighted Gaussian mixture.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    comps: Vec<DensityComponent>,
}

/// Value, gradient and Hessian of `log q` at one point.
#[derive(Debug, Clone)]
pub struct DensityEval {
    pub log_q: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl MixtureDensity {
    pub fn new(belief: &MixtureBelief) -> Result<Self> {
        let lw = belief.weight().ln();
        let comps = belief
            .components
            .iter()
            .map(|c| {
                let chol = linalg::cholesky(&c.cov, "mixture component covariance")?;
                let precision = linalg::inverse_from_cholesky(&chol);
                let log_scale =
                    lw - 0.5 * (linalg::log_det_from_cholesky(&chol) + c.dim() as f64 * LN_2PI);
                Ok(DensityComponent {
                    mean: c.mean.clone(),
                    chol,
                    precision,
                    log_scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { comps })
    }

    fn log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| {
                let z = c
                    .chol
                    .solve_lower_triangular(&(x - &c.mean))
                    .expect("cholesky factor has a nonzero diagonal");
                c.log_scale - 0.5 * z.norm_squared()
            })
            .collect()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        linalg::log_sum_exp(self.log_terms(x))
    }

    /// Component responsibilities at `x` and the log density.
    fn responsibilities(&self, x: &DVector<f64>) -> (Vec<f64>, f64) {
        let terms = self.log_terms(x);
        let lse = linalg::log_sum_exp(terms.iter().copied());
        (terms.iter().map(|t| (t - lse).exp()).collect(), lse)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let (gamma, _) = self.responsibilities(x);
        let mut g = DVector::zeros(x.len());
        for (c, w) in self.comps.iter().zip(gamma) {
            g -= (&c.precision * (x - &c.mean)) * w;
        }
        g
    }

    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.eval(x).hess
    }

    pub fn eval(&self, x: &DVector<f64>) -> DensityEval {
        let d = x.len();
        let (gamma, log_q) = self.responsibilities(x);
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for (c, w) in self.comps.iter().zip(gamma) {
            let gi = -(&c.precision * (x - &c.mean));
            hess += (&gi * gi.transpose() - &c.precision) * w;
            grad += gi * w;
        }
        hess -= &grad * grad.transpose();
        DensityEval { log_q, grad, hess }
    }
}

/// Applies the affine prediction to every component; weights are unchanged.
pub fn mixture_predict(
    belief: &MixtureBelief,
    transition: &AffineGaussianTransition,
) -> MixtureBelief {
    MixtureBelief {
        components: belief
            .components
            .iter()
            .map(|c| vwf::predict(c, transition))
            .collect(),
    }
}

/// Potential whose prior term is the predictive mixture.
pub fn mixture_potential<'a>(
    observation: &'a dyn ObservationModel,
    y: &'a DVector<f64>,
    predictive: &MixtureBelief,
) -> Result<Potential<'a>> {
    let prior = if predictive.len() == 1 {
        PriorTerm::gaussian(&predictive.components[0])?
    } else {
        PriorTerm::Mixture(MixtureDensity::new(predictive)?)
    };
    Ok(Potential {
        observation,
        y,
        prior,
    })
}

fn component_rhs(
    nodes: &TransformedNodes,
    q: &MixtureDensity,
    potential: &Potential<'_>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = nodes.factor.nrows();
    let mut er = DVector::zeros(d);
    let mut eh = DMatrix::zeros(d, d);
    for (x, &w) in nodes.points.iter().zip(&nodes.weights) {
        let dq = q.eval(x);
        let r = dq.grad + potential.grad(x);
        let h = dq.hess + potential.hess(x);
        if r.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIntegrand {
                node: x.iter().copied().collect(),
            });
        }
        er.axpy(w, &r, 1.0);
        eh += h * w;
    }
    let cov = &nodes.factor * nodes.factor.transpose();
    let ec = &eh * cov;
    Ok((-er, linalg::symmetrized(-&ec - ec.transpose())))
}

/// Velocities `(dμᵢ, dΣᵢ)` of every component.
pub fn mixture_flow_rhs(
    belief: &MixtureBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let q = MixtureDensity::new(belief)?;
    belief
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vwf::check_rule(c, rule)?;
            let nodes = rule.transform(c)?;
            component_rhs(&nodes, &q, potential).map_err(|e| match e {
                Error::NonFiniteIntegrand { node } => Error::FlowBlowUp(format!(
                    "component {i}: non-finite integrand at {node:?}"
                )),
                other => other,
            })
        })
        .collect()
}

fn mixture_euler_step(
    belief: &MixtureBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    h: f64,
    config: &FlowConfig,
) -> Result<MixtureBelief> {
    let rhs = mixture_flow_rhs(belief, potential, rule)?;
    let mut components = Vec::with_capacity(belief.len());
    for (c, (fm, fp)) in belief.components.iter().zip(rhs) {
        let mean = &c.mean + fm * h;
        let mut step = h;
        let mut accepted = None;
        for _ in 0..=30 {
            let cov = linalg::symmetrized(&c.cov + &fp * step);
            if vwf::above_floor(&cov, config.jitter) {
                accepted = Some(cov);
                break;
            }
            step *= 0.5;
        }
        let cov = accepted.ok_or(Error::StepFailure { halvings: 30 })?;
        components.push(GaussianBelief { mean, cov });
    }
    Ok(MixtureBelief { components })
}

/// Settings of the mixture filter beyond the flow itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub flow: FlowConfig,
    /// Two components are reported as collapsed when their means are closer
    /// than `merge_factor · √trace(Σ)` (Σ averaged over the pair).
    pub merge_factor: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            merge_factor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseEvent {
    pub step: usize,
    pub components: (usize, usize),
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureInnovation {
    pub belief: MixtureBelief,
    pub iterations: usize,
    pub converged: bool,
    pub step_size: f64,
    /// Collapsed pairs `(i, j, distance)`.
    pub collapsed: Vec<(usize, usize, f64)>,
}

fn collapsed_pairs(belief: &MixtureBelief, merge_factor: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..belief.len() {
        for j in (i + 1)..belief.len() {
            let (a, b) = (&belief.components[i], &belief.components[j]);
            let dist = (&a.mean - &b.mean).norm();
            let scale = (0.5 * (a.cov.trace() + b.cov.trace())).max(0.0).sqrt();
            if dist < merge_factor * scale {
                out.push((i, j, dist));
            }
        }
    }
    out
}

fn mixture_initial_step(
    start: &MixtureBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<f64> {
    let mut h = config.step_size;
    if matches!(config.step_control, StepControl::CurvatureCapped { .. }) {
        for c in &start.components {
            h = h.min(vwf::initial_step(c, potential, rule, config)?);
        }
    }
    Ok(h)
}

/// Coupled Euler fixed-point iteration of all components, starting from the
/// predictive. Divergence handling matches [`vwf::innovate_from`].
pub fn mixture_innovate(
    predictive: &MixtureBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
    config: &MixtureConfig,
) -> Result<MixtureInnovation> {
    let potential = mixture_potential(model.observation.as_ref(), y, predictive)?;
    mixture_innovate_from(predictive, &potential, rule, config)
}

pub fn mixture_innovate_from(
    start: &MixtureBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    config: &MixtureConfig,
) -> Result<MixtureInnovation> {
    let flow = &config.flow;
    flow.validate()?;
    let mut h = mixture_initial_step(start, potential, rule, flow)?;
    let mut z = start.clone();
    let mut best = start.clone();
    let mut monitor = UpdateMonitor::new();
    let mut shrinks = 0;
    let finish = |belief: MixtureBelief, iterations, converged, step_size| {
        let collapsed = collapsed_pairs(&belief, config.merge_factor);
        MixtureInnovation {
            belief,
            iterations,
            converged,
            step_size,
            collapsed,
        }
    };
    for iter in 1..=flow.max_iters {
        let failure = match mixture_euler_step(&z, potential, rule, h, flow) {
            Ok(next) => {
                let delta = next.sup_distance(&z);
                if !delta.is_finite() {
                    Error::FlowBlowUp("non-finite mixture update".into())
                } else if delta < flow.tol {
                    return Ok(finish(next, iter, true, h));
                } else {
                    let dir = DVector::from_iterator(
                        z.components.iter().map(|c| c.dim() * (c.dim() + 1)).sum(),
                        z.components
                            .iter()
                            .zip(&next.components)
                            .flat_map(|(a, b)| update_direction(a, b).data.as_vec().clone()),
                    );
                    let verdict = monitor.observe(delta, dir);
                    z = next;
                    match verdict {
                        Verdict::NewBest => {
                            best = z.clone();
                            continue;
                        }
                        Verdict::Continue => continue,
                        Verdict::Diverging => Error::FlowBlowUp("mixture updates oscillated and kept growing".into()),
                        Verdict::Stalled => Error::FlowBlowUp("mixture updates stopped shrinking".into()),
                    }
                }
            }
            Err(
                e @ (Error::StepFailure { .. }
                | Error::FlowBlowUp(_)
                | Error::NotPositiveDefinite { .. }),
            ) => e,
            Err(e) => return Err(e),
        };
        shrinks += 1;
        if shrinks > flow.max_step_shrinks {
            return Err(failure);
        }
        h *= 0.5;
        z = best.clone();
        monitor.restart();
    }
    Ok(finish(z, flow.max_iters, false, h))
}

/// `log Σᵢ wᵢ E_{N(m̄ᵢ, P̄ᵢ)}[p(y | x)]`.
pub fn mixture_loglik_increment(
    predictive: &MixtureBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
) -> Result<f64> {
    let lw = predictive.weight().ln();
    let terms = predictive
        .components
        .iter()
        .map(|c| Ok(lw + vwf::predictive_loglik(c, y, model.observation.as_ref(), rule)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(linalg::log_sum_exp(terms))
}

/// The same integral importance-weighted through the converged posterior
/// mixture: `Σᵢ wᵢ Σ_j w_j p(y | Z_ij) q̄(Z_ij) / q*(Z_ij)`.
pub fn mixture_loglik_increment_posterior(
    predictive: &MixtureBelief,
    posterior: &MixtureBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
) -> Result<f64> {
    if predictive.len() == 1 && posterior.len() == 1 {
        return vwf::posterior_loglik(
            &predictive.components[0],
            &posterior.components[0],
            y,
            model.observation.as_ref(),
            rule,
        );
    }
    let prior = MixtureDensity::new(predictive)?;
    let post = MixtureDensity::new(posterior)?;
    let lw = posterior.weight().ln();
    let mut terms = Vec::with_capacity(posterior.len() * rule.len());
    for c in &posterior.components {
        let nodes = rule.transform(c)?;
        for (x, &w) in nodes.points.iter().zip(&nodes.weights) {
            let t = lw + w.ln() + model.observation.log_density(y, x) + prior.log_density(x)
                - post.log_density(x);
            if t.is_nan() || t == f64::INFINITY {
                return Err(Error::NonFiniteIntegrand {
                    node: x.iter().copied().collect(),
                });
            }
            terms.push(t);
        }
    }
    Ok(linalg::log_sum_exp(terms))
}

/// Per-step output of the mixture filter. Index `k − 1` holds step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRun {
    pub filtered: Vec<MixtureBelief>,
    pub predicted: Vec<MixtureBelief>,
    pub loglik: f64,
    pub increments: Vec<f64>,
    pub iters_per_step: Vec<usize>,
    pub converged: Vec<bool>,
    pub collapse_events: Vec<CollapseEvent>,
}

impl MixtureRun {
    pub fn steps(&self) -> usize {
        self.filtered.len()
    }

    pub fn converged_steps(&self) -> usize {
        self.converged.iter().filter(|c| **c).count()
    }
}

/// Multi-modal filter: `init` is the mixture for `x_0` (it replaces the model
/// prior), and each step predicts, innovates and integrates `ℓ_k`.
pub fn mixture_filter(
    model: &ModelDefinition,
    observations: &[DVector<f64>],
    init: &MixtureBelief,
    rule: &QuadratureRule,
    config: &MixtureConfig,
) -> Result<MixtureRun> {
    model.check_observations(observations)?;
    config.flow.validate()?;
    if init.dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "initial mixture has dimension {}, model {}",
            init.dim(),
            model.dim()
        )));
    }
    let nodes = rule.build(model.dim())?;
    let k_total = observations.len();
    let mut run = MixtureRun {
        filtered: Vec::with_capacity(k_total),
        predicted: Vec::with_capacity(k_total),
        loglik: 0.0,
        increments: Vec::with_capacity(k_total),
        iters_per_step: Vec::with_capacity(k_total),
        converged: Vec::with_capacity(k_total),
        collapse_events: Vec::new(),
    };
    let mut belief = init.clone();
    for (i, y) in observations.iter().enumerate() {
        let k = i + 1;
        let step = || -> Result<_> {
            let pred = mixture_predict(&belief, &model.transition_at(k - 1));
            let inn = mixture_innovate(&pred, y, model, &nodes, config)?;
            let inc = match config.flow.likelihood {
                LikelihoodRule::Predictive => mixture_loglik_increment(&pred, y, model, &nodes)?,
                LikelihoodRule::PosteriorImportance => {
                    mixture_loglik_increment_posterior(&pred, &inn.belief, y, model, &nodes)?
                }
            };
            Ok((pred, inn, inc))
        };
        let (pred, inn, inc) = step().map_err(|e| e.at_step(k))?;
        for &(a, b, distance) in &inn.collapsed {
            run.collapse_events.push(CollapseEvent {
                step: k,
                components: (a, b),
                distance,
            });
        }
        belief = inn.belief.clone();
        run.predicted.push(pred);
        run.filtered.push(inn.belief);
        run.increments.push(inc);
        run.loglik += inc;
        run.iters_per_step.push(inn.iterations);
        run.converged.push(inn.converged);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{make_bimodal_model, make_lgssm_model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn gh5(d: usize) -> UnitNodeSet {
        QuadratureRule::gauss_hermite(5).build(d).unwrap()
    }

    #[test]
    fn predict_examples() {
        let t = AffineGaussianTransition::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let m = MixtureBelief::mirrored(v1(1.0), DMatrix::from_element(1, 1, 0.5));
        let p = mixture_predict(&m, &t);
        assert_eq!(p.components[0], GaussianBelief::scalar(1.0, 1.5));
        assert_eq!(p.components[1], GaussianBelief::scalar(-1.0, 1.5));
        let single = MixtureBelief::single(GaussianBelief::scalar(0.3, 2.0));
        assert_eq!(
            mixture_predict(&single, &t).components[0],
            vwf::predict(&single.components[0], &t)
        );
    }

    #[test]
    fn density_derivatives_match_finite_differences() {
        let m = MixtureBelief::new(vec![
            GaussianBelief::new(
                DVector::from_vec(vec![1.0, -0.5]),
                DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]),
            )
            .unwrap(),
            GaussianBelief::new(
                DVector::from_vec(vec![-1.0, 0.3]),
                DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.9]),
            )
            .unwrap(),
        ])
        .unwrap();
        let q = MixtureDensity::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..100 {
            let x = DVector::from_vec(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            let e = q.eval(&x);
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (q.log_density(&xp) - q.log_density(&xm)) / (2.0 * h);
                assert!((fd - e.grad[i]).abs() / fd.abs().max(1.0) < 1e-4);
                let fdg = (q.grad(&xp) - q.grad(&xm)) / (2.0 * h);
                for j in 0..2 {
                    assert!((fdg[j] - e.hess[(j, i)]).abs() / fdg[j].abs().max(1.0) < 1e-4);
                }
            }
        }
    }

    fn lgssm_1d() -> ModelDefinition {
        make_lgssm_model(
            DMatrix::from_element(1, 1, 0.9),
            v1(0.1),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            v1(0.0),
            DMatrix::from_element(1, 1, 0.7),
            GaussianBelief::scalar(0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn single_component_rhs_matches_unimodal_flow() {
        let model = lgssm_1d();
        let y = v1(0.8);
        let pred = GaussianBelief::scalar(0.2, 1.3);
        let belief = GaussianBelief::scalar(0.5, 0.6);
        let pot = Potential::new(model.observation.as_ref(), &y, &pred).unwrap();
        let (fm, fp) = vwf::flow_rhs(&belief, &pot, &gh5(1)).unwrap();
        let mix = mixture_flow_rhs(&MixtureBelief::single(belief), &pot, &gh5(1)).unwrap();
        assert!((&mix[0].0 - fm).amax() < 1e-10);
        assert!((&mix[0].1 - fp).amax() < 1e-10);
    }

    #[test]
    fn rhs_vanishes_when_target_is_the_mixture() {
        let m = MixtureBelief::mirrored(v1(1.5), DMatrix::from_element(1, 1, 0.4));
        let obs = crate::vwf::tests_support::FlatObservation(1);
        let y = v1(0.0);
        let pot = mixture_potential(&obs, &y, &m).unwrap();
        for (fm, fp) in mixture_flow_rhs(&m, &pot, &gh5(1)).unwrap() {
            assert!(fm.amax() < 1e-12 && fp.amax() < 1e-12);
        }
    }

    #[test]
    fn mirrored_rhs_is_mirrored() {
        let model = make_bimodal_model(1.0).unwrap();
        let pred = MixtureBelief::mirrored(v1(1.2), DMatrix::from_element(1, 1, 0.7));
        let y = v1(2.0);
        let pot = mixture_potential(model.observation.as_ref(), &y, &pred).unwrap();
        let cur = MixtureBelief::mirrored(v1(0.9), DMatrix::from_element(1, 1, 0.5));
        let rhs = mixture_flow_rhs(&cur, &pot, &gh5(1)).unwrap();
        assert!((rhs[0].0[0] + rhs[1].0[0]).abs() < 1e-12);
        assert!((rhs[0].1[(0, 0)] - rhs[1].1[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn bimodal_innovation_finds_grid_modes() {
        let model = make_bimodal_model(1.0).unwrap();
        let pred = MixtureBelief::mirrored(v1(3.0), DMatrix::identity(1, 1));
        let y = v1(3.0);
        let out = mixture_innovate(&pred, &y, &model, &gh5(1), &MixtureConfig::default()).unwrap();
        assert!(out.converged);
        // Grid posterior on [-10, 10].
        let q = MixtureDensity::new(&pred).unwrap();
        let n = 100_000;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=n {
            let x = -10.0 + 20.0 * i as f64 / n as f64;
            let lp = -0.5 * (3.0 - f64::abs(x)).powi(2) + q.log_density(&v1(x));
            if x > 0.0 && lp > best.0 {
                best = (lp, x);
            }
        }
        let mode = best.1;
        let m0 = out.belief.components[0].mean[0];
        let m1 = out.belief.components[1].mean[0];
        assert!((m0 - mode).abs() < 0.1, "{m0} vs {mode}");
        assert!((m1 + mode).abs() < 0.1, "{m1} vs {}", -mode);
        assert!((m0 + m1).abs() < 1e-8);
    }

    #[test]
    fn identical_components_give_single_component_likelihood() {
        let model = lgssm_1d();
        let c = GaussianBelief::scalar(0.4, 1.1);
        let y = v1(-0.3);
        let one = mixture_loglik_increment(&MixtureBelief::single(c.clone()), &y, &model, &gh5(1)).unwrap();
        let three = mixture_loglik_increment(
            &MixtureBelief::new(vec![c.clone(), c.clone(), c.clone()]).unwrap(),
            &y,
            &model,
            &gh5(1),
        )
        .unwrap();
        let uni = vwf::loglik_increment(&c, &y, &model, &gh5(1)).unwrap();
        assert!((one - uni).abs() < 1e-14);
        assert!((three - uni).abs() < 1e-13);
    }

    #[test]
    fn mirrored_likelihood_matches_monte_carlo() {
        let model = make_bimodal_model(1.0).unwrap();
        let pred = MixtureBelief::mirrored(v1(1.5), DMatrix::from_element(1, 1, 0.8));
        let y = v1(1.0);
        let fine = QuadratureRule::gauss_hermite(40).build(1).unwrap();
        let quad_fine = mixture_loglik_increment(&pred, &y, &model, &fine).unwrap().exp();
        let cfg = MixtureConfig::default();
        let post = mixture_innovate(&pred, &y, &model, &gh5(1), &cfg).unwrap();
        let quad = mixture_loglik_increment_posterior(&pred, &post.belief, &y, &model, &gh5(1))
            .unwrap()
            .exp();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = sign * 1.5 + 0.8f64.sqrt() * z;
            let p = model.observation.log_density(&y, &v1(x)).exp();
            s += p;
            s2 += p * p;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        // Gauss-Hermite converges slowly on the kink of |x|.
        assert!((quad_fine - mean).abs() < 0.01 * mean, "{quad_fine} vs {mean} ± {se}");
        // The posterior mixture is not the exact posterior, so the importance
        // form carries a small bias.
        assert!((quad - mean).abs() < 0.01 * mean, "{quad} vs {mean} ± {se}");
    }

    #[test]
    fn near_identical_components_flag_collapse() {
        let model = make_bimodal_model(1.0).unwrap();
        let init = MixtureBelief::new(vec![
            GaussianBelief::scalar(0.5, 1.0),
            GaussianBelief::scalar(0.5 + 1e-6, 1.0),
        ])
        .unwrap();
        let obs = vec![v1(1.0), v1(0.5)];
        let run = mixture_filter(&model, &obs, &init, &QuadratureRule::default(), &MixtureConfig::default()).unwrap();
        assert!(run.collapse_events.iter().any(|e| e.step == 1));
    }

    #[test]
    fn empty_mixture_rejected() {
        assert!(MixtureBelief::new(vec![]).is_err());
    }
}
