//! Bootstrap particle filter with continuous (Malik–Pitt) resampling.
//!
//! Particles are sorted, and resampling draws stratified uniforms through the
//! inverse of the piecewise-linear smoothed empirical CDF: half of the first
//! and last weights stay as point masses at the extremes, and
//! `(πᵢ + πᵢ₊₁)/2` is spread uniformly between neighbours. The resampled set
//! moves continuously with the weights, so with common random numbers the
//! likelihood estimate is continuous in the parameters.
//!
//! Random draws per step are fixed: `N` normals for propagation followed by
//! `N` uniforms for resampling, after `N` normals for the initial draw.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::ssm::{ModelDefinition, SVParameters};
use crate::vwf::FilterRun;

/// A scalar-state model seen by the particle filter.
pub trait ParticleModel: Send + Sync {
    /// `x_0` from a standard normal draw.
    fn sample_initial(&self, z: f64) -> f64;
    /// `x_k` from `x_{k−1}`, the previous observation (absent at `k = 1`) and
    /// a standard normal draw.
    fn propagate(&self, k: usize, x_prev: f64, y_prev: Option<f64>, z: f64) -> f64;
    fn log_likelihood(&self, y: f64, x: f64) -> f64;
}

/// One-dimensional affine Gaussian transition with an arbitrary observation.
#[derive(Debug, Clone)]
pub struct ScalarParticleModel {
    model: ModelDefinition,
}

impl ScalarParticleModel {
    pub fn from_definition(model: &ModelDefinition) -> Result<Self> {
        if model.dim() != 1 || model.obs_dim() != 1 {
            return Err(Error::Config(format!(
                "particle filter needs a scalar state and observation, model {} has d = {}, m = {}",
                model.name,
                model.dim(),
                model.obs_dim()
            )));
        }
        Ok(Self {
            model: model.clone(),
        })
    }
}

impl ParticleModel for ScalarParticleModel {
    fn sample_initial(&self, z: f64) -> f64 {
        self.model.prior.mean[0] + self.model.prior.cov[(0, 0)].max(0.0).sqrt() * z
    }

    fn propagate(&self, k: usize, x_prev: f64, _y_prev: Option<f64>, z: f64) -> f64 {
        let t = self.model.transition_at(k - 1);
        t.a[(0, 0)] * x_prev + t.b[0] + t.q[(0, 0)].max(0.0).sqrt() * z
    }

    fn log_likelihood(&self, y: f64, x: f64) -> f64 {
        self.model
            .observation
            .log_density(&DVector::from_element(1, y), &DVector::from_element(1, x))
    }
}

/// The SV model reduced to the log-volatility `X`: the return noise of step
/// `k − 1` is recovered as `y_{k−1} e^{−X_{k−1}/2}` and conditions the
/// volatility shock,
/// `X_k = μ + α(X_{k−1} − μ) + σ(ρ y_{k−1} e^{−X_{k−1}/2} + √(1−ρ²) ξ)`.
/// At `k = 1` there is no previous return and the shock is unconditional.
#[derive(Debug, Clone, Copy)]
pub struct SvParticleModel {
    params: SVParameters,
}

impl SvParticleModel {
    pub fn new(params: SVParameters) -> Self {
        Self { params }
    }
}

impl ParticleModel for SvParticleModel {
    fn sample_initial(&self, z: f64) -> f64 {
        self.params.mu + self.params.stationary_variance().sqrt() * z
    }

    fn propagate(&self, _k: usize, x_prev: f64, y_prev: Option<f64>, z: f64) -> f64 {
        let p = &self.params;
        let shock = match y_prev {
            Some(y) => p.rho * y * (-0.5 * x_prev).exp() + (1.0 - p.rho * p.rho).sqrt() * z,
            None => z,
        };
        p.mu + p.alpha * (x_prev - p.mu) + p.sigma * shock
    }

    fn log_likelihood(&self, y: f64, x: f64) -> f64 {
        -0.5 * (LN_2PI + x + y * y * (-x).exp())
    }
}

/// Draws from the smoothed empirical CDF of sorted `(x, π)` at ascending `u`.
pub(crate) fn continuous_resample(sorted: &[(f64, f64)], uniforms: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    let mut out = Vec::with_capacity(uniforms.len());
    let mut i = 0;
    let mut lower = 0.5 * sorted[0].1;
    for &u in uniforms {
        if u < 0.5 * sorted[0].1 {
            out.push(sorted[0].0);
            continue;
        }
        loop {
            if i + 1 >= n {
                out.push(sorted[n - 1].0);
                break;
            }
            let mass = 0.5 * (sorted[i].1 + sorted[i + 1].1);
            if u < lower + mass {
                let frac = if mass > 0.0 { (u - lower) / mass } else { 0.0 };
                out.push(sorted[i].0 + frac * (sorted[i + 1].0 - sorted[i].0));
                break;
            }
            lower += mass;
            i += 1;
        }
    }
    out
}

fn moments(xs: &[f64], ws: Option<&[f64]>) -> GaussianBelief {
    let n = xs.len() as f64;
    let (mean, var) = match ws {
        Some(w) => {
            let m: f64 = xs.iter().zip(w).map(|(x, w)| x * w).sum();
            let v: f64 = xs.iter().zip(w).map(|(x, w)| w * (x - m) * (x - m)).sum();
            (m, v)
        }
        None => {
            let m = xs.iter().sum::<f64>() / n;
            (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
        }
    };
    GaussianBelief::scalar(mean, var)
}

/// Runs the filter; `ℓ = Σ_k log( (1/N) Σ_i p(y_k | x_k^i) )`.
///
/// The returned beliefs summarize the particles by mean and variance:
/// `predicted` before weighting, `filtered` after.
pub fn bootstrap_pf(
    model: &dyn ParticleModel,
    observations: &[DVector<f64>],
    n_particles: usize,
    seed: u64,
) -> Result<FilterRun> {
    if observations.is_empty() {
        return Err(Error::Config("observation sequence is empty".into()));
    }
    if n_particles < 2 {
        return Err(Error::Config(format!("need at least 2 particles, got {n_particles}")));
    }
    if let Some(bad) = observations.iter().position(|y| y.len() != 1) {
        return Err(Error::Dimension(format!(
            "particle filter takes scalar observations, step {} has length {}",
            bad + 1,
            observations[bad].len()
        )));
    }
    let n = n_particles;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut particles: Vec<f64> = (0..n)
        .map(|_| model.sample_initial(StandardNormal.sample(&mut rng)))
        .collect();
    let mut run = FilterRun::with_capacity(observations.len());
    let mut log_w = vec![0.0; n];
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut uniforms = vec![0.0; n];
    let ln_n = (n as f64).ln();

    for (i, y) in observations.iter().enumerate() {
        let k = i + 1;
        let y_prev = if k > 1 { Some(observations[k - 2][0]) } else { None };
        for x in particles.iter_mut() {
            *x = model.propagate(k, *x, y_prev, StandardNormal.sample(&mut rng));
        }
        for (j, u) in uniforms.iter_mut().enumerate() {
            *u = (j as f64 + rng.random::<f64>()) / n as f64;
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        for (lw, &x) in log_w.iter_mut().zip(&particles) {
            let v = model.log_likelihood(y[0], x);
            *lw = if v.is_nan() { f64::NEG_INFINITY } else { v };
        }
        let lse = linalg::log_sum_exp(log_w.iter().copied());
        if !lse.is_finite() {
            return Err(Error::ParticleDegeneracy { step: k });
        }
        let weights: Vec<f64> = log_w.iter().map(|lw| (lw - lse).exp()).collect();
        let predicted = moments(&particles, None);
        let filtered = moments(&particles, Some(&weights));

        pairs.clear();
        pairs.extend(particles.iter().copied().zip(weights.iter().copied()));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        particles = continuous_resample(&pairs, &uniforms);

        run.push(predicted, filtered, lse - ln_n, 0, true);
    }
    Ok(run)
}
