use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Mean/covariance pair of a Gaussian marginal (filtering or predictive).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        linalg::check_square(&cov, mean.len(), "covariance")?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("belief has non-finite entries".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest absolute change in mean or covariance entries.
    pub fn sup_distance(&self, other: &GaussianBelief) -> f64 {
        (&self.mean - &other.mean).amax() + (&self.cov - &other.cov).amax()
    }

    /// Closed-form `KL(self ‖ other)` between two Gaussians.
    pub fn kl_divergence(&self, other: &GaussianBelief) -> Result<f64> {
        let d = self.dim() as f64;
        let lo = linalg::cholesky(&other.cov, "kl target")?;
        let ls = linalg::cholesky(&self.cov, "kl source")?;
        let other_inv = linalg::inverse_from_cholesky(&lo);
        let diff = &other.mean - &self.mean;
        let trace = (&other_inv * &self.cov).trace();
        let quad = diff.dot(&(&other_inv * &diff));
        Ok(0.5
            * (trace + quad - d + linalg::log_det_from_cholesky(&lo)
                - linalg::log_det_from_cholesky(&ls)))
    }
}
