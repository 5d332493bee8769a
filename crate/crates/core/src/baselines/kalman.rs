use nalgebra::{DMatrix, DVector};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::ssm::{EkfLinearization, ModelDefinition};
use crate::vwf::{predict, FilterRun};

/// Gaussian measurement update given the predicted observation mean, its
/// Jacobian and the noise covariance. Returns the posterior and
/// `log N(y | ŷ, S)`.
pub(crate) fn gaussian_update(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(GaussianBelief, f64)> {
    let s = linalg::symmetrized(h * &pred.cov * h.transpose() + r);
    let l = linalg::cholesky_jittered(&s, 1e-9, "innovation covariance")
        .map_err(|_| Error::Degenerate("innovation covariance is singular".into()))?;
    let e = y - y_hat;
    let pht = &pred.cov * h.transpose();
    // K = P Hᵀ S⁻¹, via two triangular solves on Kᵀ = S⁻¹ H P.
    let kt = l
        .solve_lower_triangular(&pht.transpose())
        .and_then(|z| l.transpose().solve_upper_triangular(&z))
        .ok_or_else(|| Error::Degenerate("innovation covariance is singular".into()))?;
    let k = kt.transpose();
    let mean = &pred.mean + &k * &e;
    let cov = linalg::symmetrized(&pred.cov - &k * &s * k.transpose());
    let z = l
        .solve_lower_triangular(&e)
        .ok_or_else(|| Error::Degenerate("innovation covariance is singular".into()))?;
    let ll = -0.5 * (z.norm_squared() + linalg::log_det_from_cholesky(&l) + e.len() as f64 * LN_2PI);
    Ok((GaussianBelief { mean, cov }, ll))
}

/// Exact filtering for affine Gaussian models.
pub fn kalman_filter(model: &ModelDefinition, observations: &[DVector<f64>]) -> Result<FilterRun> {
    model.check_observations(observations)?;
    let lin = model
        .linear_observation
        .as_ref()
        .ok_or_else(|| Error::Config(format!("model {} is not linear Gaussian", model.name)))?;
    let mut run = FilterRun::with_capacity(observations.len());
    let mut belief = model.prior.clone();
    for (i, y) in observations.iter().enumerate() {
        let k = i + 1;
        let pred = predict(&belief, &model.transition_at(k - 1));
        let y_hat = &lin.h * &pred.mean + &lin.c;
        let (post, ll) =
            gaussian_update(&pred, y, &y_hat, &lin.h, &lin.r).map_err(|e| e.at_step(k))?;
        belief = post.clone();
        run.push(pred, post, ll, 0, true);
    }
    Ok(run)
}

/// Extended Kalman filter using the model's own linearization.
pub fn ekf_filter(model: &ModelDefinition, observations: &[DVector<f64>]) -> Result<FilterRun> {
    let lin = model
        .linearization
        .clone()
        .ok_or_else(|| Error::Config(format!("model {} has no EKF linearization", model.name)))?;
    ekf_filter_with(model, observations, lin.as_ref())
}

/// EKF with the Jacobian and noise covariance evaluated at the predicted mean.
pub fn ekf_filter_with(
    model: &ModelDefinition,
    observations: &[DVector<f64>],
    lin: &dyn EkfLinearization,
) -> Result<FilterRun> {
    model.check_observations(observations)?;
    let mut run = FilterRun::with_capacity(observations.len());
    let mut belief = model.prior.clone();
    for (i, y) in observations.iter().enumerate() {
        let k = i + 1;
        let pred = predict(&belief, &model.transition_at(k - 1));
        let y_hat = lin.obs_mean(&pred.mean);
        let h = lin.obs_mean_jacobian(&pred.mean);
        let r = lin.obs_noise_cov(&pred.mean);
        let (post, ll) = gaussian_update(&pred, y, &y_hat, &h, &r).map_err(|e| e.at_step(k))?;
        belief = post.clone();
        run.push(pred, post, ll, 0, true);
    }
    Ok(run)
}
