use nalgebra::DVector;

use super::flow::{check_rule, euler_step, FlowConfig, Potential, StepControl};
use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::quadrature::UnitNodeSet;
use crate::ssm::{ModelDefinition, ObservationModel};

/// Outcome of one innovation.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub belief: GaussianBelief,
    pub iterations: usize,
    pub converged: bool,
    /// Euler step in force when the iteration stopped.
    pub step_size: f64,
}

/// Consecutive growing, direction-reversing updates taken as a sign of an
/// unstable step.
pub(crate) const DIVERGENCE_RUN: usize = 5;
/// Direction-reversing updates without a new smallest update taken as a
/// bounded oscillation.
pub(crate) const STALL_WINDOW: usize = 100;

/// Watches the update sequence of an Euler iteration. Only oscillating
/// updates (consecutive updates pointing in opposing directions) count
/// against the step: a smooth run of growing updates is the iterate
/// accelerating away from a saddle and is left alone.
pub(crate) struct UpdateMonitor {
    best: f64,
    prev: f64,
    prev_dir: Option<DVector<f64>>,
    rises: usize,
    since_best: usize,
}

pub(crate) enum Verdict {
    Continue,
    NewBest,
    Diverging,
    Stalled,
}

impl UpdateMonitor {
    pub(crate) fn new() -> Self {
        Self {
            best: f64::INFINITY,
            prev: f64::INFINITY,
            prev_dir: None,
            rises: 0,
            since_best: 0,
        }
    }

    /// Forget the history after a step-size change.
    pub(crate) fn restart(&mut self) {
        self.prev = f64::INFINITY;
        self.prev_dir = None;
        self.rises = 0;
        self.since_best = 0;
        self.best = f64::INFINITY;
    }

    pub(crate) fn observe(&mut self, delta: f64, dir: DVector<f64>) -> Verdict {
        let reversed = self.prev_dir.as_ref().is_some_and(|p| p.dot(&dir) < 0.0);
        self.rises = if delta > self.prev && reversed { self.rises + 1 } else { 0 };
        self.prev = delta;
        self.prev_dir = Some(dir);
        if delta < self.best {
            self.best = delta;
            self.since_best = 0;
            return Verdict::NewBest;
        }
        if reversed {
            self.since_best += 1;
        }
        if self.rises >= DIVERGENCE_RUN {
            Verdict::Diverging
        } else if self.since_best >= STALL_WINDOW {
            Verdict::Stalled
        } else {
            Verdict::Continue
        }
    }
}

/// Mean and covariance entries of `b − a` as one vector.
pub(crate) fn update_direction(a: &GaussianBelief, b: &GaussianBelief) -> DVector<f64> {
    let dm = &b.mean - &a.mean;
    let dp = &b.cov - &a.cov;
    DVector::from_iterator(dm.len() + dp.len(), dm.iter().chain(dp.iter()).copied())
}

pub(crate) fn initial_step(
    start: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<f64> {
    let h = config.step_size;
    let StepControl::CurvatureCapped { safety } = config.step_control else {
        return Ok(h);
    };
    let nodes = rule.transform(start)?;
    let d = start.dim();
    let mut hess = nalgebra::DMatrix::zeros(d, d);
    for (x, &w) in nodes.points.iter().zip(&nodes.weights) {
        hess += potential.hess(x) * w;
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return Ok(h);
    }
    let lambda = nalgebra::SymmetricEigen::new(linalg::symmetrized(hess))
        .eigenvalues
        .max();
    Ok(if lambda > 0.0 { h.min(safety / lambda) } else { h })
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::StepFailure { .. }
            | Error::NonFiniteIntegrand { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::FlowBlowUp(_)
    )
}

/// Fixed-point iteration of the Euler map from `start` until the update is
/// below `tol` or `max_iters` applications have been made.
///
/// When updates grow for several consecutive iterations, or a step cannot be
/// completed, the step size is halved and the iteration resumes from the
/// iterate with the smallest update so far.
pub fn innovate_from(
    start: &GaussianBelief,
    potential: &Potential<'_>,
    rule: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<Innovation> {
    config.validate()?;
    check_rule(start, rule)?;
    let mut h = initial_step(start, potential, rule, config)?;
    let mut z = start.clone();
    let mut best = start.clone();
    let mut monitor = UpdateMonitor::new();
    let mut shrinks = 0;

    for iter in 1..=config.max_iters {
        let failure = match euler_step(&z, potential, rule, h, config) {
            Ok(next) => {
                let delta = next.sup_distance(&z);
                if !delta.is_finite() {
                    Error::FlowBlowUp("non-finite update".into())
                } else if delta < config.tol {
                    return Ok(Innovation {
                        belief: next,
                        iterations: iter,
                        converged: true,
                        step_size: h,
                    });
                } else {
                    let verdict = monitor.observe(delta, update_direction(&z, &next));
                    z = next;
                    match verdict {
                        Verdict::NewBest => {
                            best = z.clone();
                            continue;
                        }
                        Verdict::Continue => continue,
                        Verdict::Diverging => {
                            Error::FlowBlowUp(format!("updates oscillated and grew {DIVERGENCE_RUN} times in a row"))
                        }
                        Verdict::Stalled => Error::FlowBlowUp(format!("no progress in {STALL_WINDOW} oscillating iterations")),
                    }
                }
            }
            Err(e) if recoverable(&e) => e,
            Err(e) => return Err(e),
        };
        shrinks += 1;
        if shrinks > config.max_step_shrinks {
            return Err(failure);
        }
        h *= 0.5;
        z = best.clone();
        monitor.restart();
    }
    Ok(Innovation {
        belief: z,
        iterations: config.max_iters,
        converged: false,
        step_size: h,
    })
}

/// Innovation step: the Gaussian closest in KL to `p(y | x) N(x | m̄, P̄)`,
/// found by iterating the Euler map from the predictive.
pub fn innovate(
    predictive: &GaussianBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
    config: &FlowConfig,
) -> Result<Innovation> {
    let potential = Potential::new(model.observation.as_ref(), y, predictive)?;
    innovate_from(predictive, &potential, rule, config)
}

/// `log E_{N(m̄, P̄)}[p(y | x)]` by quadrature on the predictive, evaluated in
/// log space. Returns `−∞` if every node density underflows.
pub fn loglik_increment(
    predictive: &GaussianBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
) -> Result<f64> {
    predictive_loglik(predictive, y, model.observation.as_ref(), rule)
}

pub(crate) fn predictive_loglik(
    predictive: &GaussianBelief,
    y: &DVector<f64>,
    obs: &dyn ObservationModel,
    rule: &UnitNodeSet,
) -> Result<f64> {
    check_rule(predictive, rule)?;
    let nodes = rule.transform(predictive)?;
    let terms: Vec<f64> = nodes
        .points
        .iter()
        .zip(&nodes.weights)
        .map(|(x, &w)| w.ln() + obs.log_density(y, x))
        .collect();
    finite_or_neg_inf(&terms, &nodes.points)?;
    Ok(linalg::log_sum_exp(terms.iter().copied()))
}

fn finite_or_neg_inf(terms: &[f64], points: &[DVector<f64>]) -> Result<()> {
    if let Some(j) = terms.iter().position(|t| t.is_nan() || *t == f64::INFINITY) {
        return Err(Error::NonFiniteIntegrand {
            node: points[j].iter().copied().collect(),
        });
    }
    Ok(())
}

/// The same integral as [`loglik_increment`], written as an expectation under
/// the posterior approximation `N(μ, Σ)`:
/// `Σ_j w_j p(y | Z_j) N(Z_j | m̄, P̄) / N(Z_j | μ, Σ)` with `Z_j = μ + L u_j`.
pub fn loglik_increment_posterior(
    predictive: &GaussianBelief,
    posterior: &GaussianBelief,
    y: &DVector<f64>,
    model: &ModelDefinition,
    rule: &UnitNodeSet,
) -> Result<f64> {
    posterior_loglik(predictive, posterior, y, model.observation.as_ref(), rule)
}

pub(crate) fn posterior_loglik(
    predictive: &GaussianBelief,
    posterior: &GaussianBelief,
    y: &DVector<f64>,
    obs: &dyn ObservationModel,
    rule: &UnitNodeSet,
) -> Result<f64> {
    check_rule(posterior, rule)?;
    let pred_chol = linalg::cholesky(&predictive.cov, "predictive covariance")?;
    let nodes = rule.transform(posterior)?;
    let d = posterior.dim() as f64;
    let shift = 0.5 * (linalg::log_det_from_cholesky(&nodes.factor) + d * LN_2PI);
    let terms: Vec<f64> = rule
        .iter()
        .zip(&nodes.points)
        .map(|((u, w), x)| {
            let u2: f64 = u.iter().map(|v| v * v).sum();
            w.ln()
                + obs.log_density(y, x)
                + linalg::gaussian_logpdf_chol(x, &predictive.mean, &pred_chol)
                + 0.5 * u2
                + shift
        })
        .collect();
    finite_or_neg_inf(&terms, &nodes.points)?;
    Ok(linalg::log_sum_exp(terms.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::QuadratureRule;
    use crate::ssm::{make_bimodal_model, make_lgssm_model, make_sv_model, SVParameters};
    use crate::vwf::tests_support::FlatObservation;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn lgssm_2d() -> ModelDefinition {
        make_lgssm_model(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            DVector::from_vec(vec![0.1, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.5]),
            DVector::from_vec(vec![0.2]),
            DMatrix::from_element(1, 1, 0.4),
            GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap()
    }

    fn kalman_update(pred: &GaussianBelief, y: &DVector<f64>) -> (GaussianBelief, f64) {
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let r = DMatrix::from_element(1, 1, 0.4);
        let c = DVector::from_vec(vec![0.2]);
        let s = &h * &pred.cov * h.transpose() + &r;
        let k = &pred.cov * h.transpose() * s.clone().try_inverse().unwrap();
        let e = y - &h * &pred.mean - c;
        let ll = -0.5 * (LN_2PI + s[(0, 0)].ln() + e[0] * e[0] / s[(0, 0)]);
        (
            GaussianBelief {
                mean: &pred.mean + &k * e,
                cov: &pred.cov - &k * &h * &pred.cov,
            },
            ll,
        )
    }

    #[test]
    fn linear_gaussian_innovation_matches_kalman() {
        let model = lgssm_2d();
        let rule = QuadratureRule::gauss_hermite(5).build(2).unwrap();
        let pred = GaussianBelief::new(
            DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.7]),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.1]);
        let cfg = FlowConfig {
            tol: 1e-10,
            ..FlowConfig::default()
        };
        let out = innovate(&pred, &y, &model, &rule, &cfg).unwrap();
        let (kf, ll) = kalman_update(&pred, &y);
        assert!(out.converged);
        assert!(out.belief.sup_distance(&kf) < 1e-6);
        // The predictive form integrates a Gaussian density with polynomial
        // quadrature and is only approximate; the posterior form is exact here.
        let l_pred = loglik_increment(&pred, &y, &model, &rule).unwrap();
        let l_post = loglik_increment_posterior(&pred, &out.belief, &y, &model, &rule).unwrap();
        assert!((l_post - ll).abs() < 1e-8);
        assert!((l_pred - ll).abs() > 1e-3);
        let fine = QuadratureRule::gauss_hermite(40).build(2).unwrap();
        assert!((loglik_increment(&pred, &y, &model, &fine).unwrap() - ll).abs() < 1e-9);
    }

    #[test]
    fn hessian_form_reaches_the_same_fixed_point() {
        let model = lgssm_2d();
        let rule = QuadratureRule::gauss_hermite(5).build(2).unwrap();
        let pred = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let y = DVector::from_vec(vec![-0.4]);
        let a = innovate(&pred, &y, &model, &rule, &FlowConfig::default()).unwrap();
        let cfg = FlowConfig {
            covariance_form: super::super::flow::CovarianceForm::Hessian,
            ..FlowConfig::default()
        };
        let b = innovate(&pred, &y, &model, &rule, &cfg).unwrap();
        assert!(a.belief.sup_distance(&b.belief) < 1e-6);
    }

    #[test]
    fn flat_observation_leaves_predictive_unchanged() {
        let mut model = make_bimodal_model(1.0).unwrap();
        model.observation = Arc::new(FlatObservation(1));
        let rule = QuadratureRule::gauss_hermite(5).build(1).unwrap();
        let pred = GaussianBelief::scalar(0.7, 2.5);
        let y = DVector::zeros(1);
        let out = innovate(&pred, &y, &model, &rule, &FlowConfig::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.belief.sup_distance(&pred) < 1e-12);
        assert!(loglik_increment(&pred, &y, &model, &rule).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bimodal_single_gaussian_moves_to_one_side() {
        // The posterior N(0,10)·N(3 | |x|, 1) has modes near ±2.7. Started
        // off-center, a single Gaussian settles on the positive side. The
        // kink of |x| makes Gauss-Hermite converge slowly, so the fixed point
        // depends on the order; it is characterized, not pinned.
        let model = make_bimodal_model(1.0).unwrap();
        let pred = GaussianBelief::scalar(0.0, 10.0);
        let y = DVector::from_element(1, 3.0);
        let start = GaussianBelief::scalar(1.0, 1.0);
        let pot = Potential::new(model.observation.as_ref(), &y, &pred).unwrap();
        for order in [5, 41] {
            let rule = QuadratureRule::gauss_hermite(order).build(1).unwrap();
            let out = innovate_from(&start, &pot, &rule, &FlowConfig::default()).unwrap();
            assert!(out.converged && out.belief.mean[0] > 1.0, "{out:?}");
        }
    }

    /// `y = sin(x) + N(0, 0.25)`: smooth and non-Gaussian.
    #[derive(Debug)]
    struct SineObservation;

    impl ObservationModel for SineObservation {
        fn obs_dim(&self) -> usize {
            1
        }
        fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
            -2.0 * (y[0] - x[0].sin()).powi(2)
        }
        fn grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 4.0 * (y[0] - x[0].sin()) * x[0].cos())
        }
        fn hess_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
            let (s, c) = x[0].sin_cos();
            DMatrix::from_element(1, 1, -4.0 * c * c - 4.0 * (y[0] - s) * s)
        }
        fn sample(&self, x: &DVector<f64>, _rng: &mut dyn rand::RngCore) -> DVector<f64> {
            x.map(f64::sin)
        }
    }

    #[test]
    fn smooth_posterior_fixed_point_minimizes_kl() {
        let pred = GaussianBelief::scalar(0.3, 1.5);
        let y = DVector::from_element(1, 0.8);
        let pot = Potential::new(&SineObservation, &y, &pred).unwrap();
        let rule = QuadratureRule::gauss_hermite(41).build(1).unwrap();
        let cfg = FlowConfig {
            tol: 1e-12,
            max_iters: 10_000,
            ..FlowConfig::default()
        };
        let out = innovate_from(&pred, &pot, &rule, &cfg).unwrap();
        assert!(out.converged);

        // KL(q ‖ p̃) up to a constant, minimized by brute force.
        let (nodes, weights) = crate::quadrature::gauss_hermite_1d(120).unwrap();
        let kl = |m: f64, v: f64| {
            let e: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(u, w)| {
                    let x = m + v.sqrt() * u;
                    w * (-2.0 * (0.8 - x.sin()).powi(2) - (x - 0.3).powi(2) / 3.0)
                })
                .sum();
            -0.5 * v.ln() - e
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=500 {
            for j in 1..=300 {
                let (m, v) = (-0.5 + i as f64 * 0.005, j as f64 * 0.005);
                let val = kl(m, v);
                if val < best.0 {
                    best = (val, m, v);
                }
            }
        }
        assert!((out.belief.mean[0] - best.1).abs() < 0.005, "{out:?} vs {best:?}");
        assert!((out.belief.cov[(0, 0)] - best.2).abs() < 0.005, "{out:?} vs {best:?}");
        assert!(kl(out.belief.mean[0], out.belief.cov[(0, 0)]) <= best.0 + 1e-9);
    }

    #[test]
    fn sv_increment_at_zero_matches_monte_carlo() {
        let model = make_sv_model(SVParameters::reference()).unwrap();
        let rule = QuadratureRule::gauss_hermite(5).build(2).unwrap();
        let pred = GaussianBelief::new(
            DVector::from_vec(vec![0.5, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.08, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let y = DVector::zeros(1);
        let post = innovate(&pred, &y, &model, &rule, &FlowConfig { tol: 1e-11, ..FlowConfig::default() }).unwrap();
        assert!(post.converged);
        let quad = loglik_increment_posterior(&pred, &post.belief, &y, &model, &rule).unwrap().exp();
        let fine = QuadratureRule::gauss_hermite(30).build(2).unwrap();
        let quad_fine = loglik_increment(&pred, &y, &model, &fine).unwrap().exp();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let l = DMatrix::from_row_slice(2, 2, &[0.08f64.sqrt(), 0.0, 0.0, 1.0]);
        for _ in 0..n {
            let z = DVector::from_vec(vec![
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ]);
            let x = &pred.mean + &l * z;
            let p = model.observation.log_density(&y, &x).exp();
            s += p;
            s2 += p * p;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((quad_fine - mean).abs() < 3.0 * se, "{quad_fine} vs {mean} ± {se}");
        assert!((quad - mean).abs() < 3.0 * se, "{quad} vs {mean} ± {se}");
    }

    #[test]
    fn growing_updates_shrink_the_step() {
        // Target N(0, 0.01): h = 0.1 gives a mean multiplier of −9.
        let model = make_lgssm_model(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 0.0101),
            GaussianBelief::scalar(0.0, 1.0),
        )
        .unwrap();
        let rule = QuadratureRule::gauss_hermite(5).build(1).unwrap();
        let pred = GaussianBelief::scalar(0.0, 1.0);
        let y = DVector::from_element(1, 2.0);
        let cfg = FlowConfig {
            step_control: StepControl::Fixed,
            max_iters: 5000,
            ..FlowConfig::default()
        };
        let out = innovate(&pred, &y, &model, &rule, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.step_size < 0.1);
        let post_var = 1.0 / (1.0 + 1.0 / 0.0101);
        assert!((out.belief.cov[(0, 0)] - post_var).abs() < 1e-6);
    }
}
