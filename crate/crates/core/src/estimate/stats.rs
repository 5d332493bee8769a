use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialStatistics {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (denominator `n − 1`); absent for one trial.
    pub std: Option<Vec<f64>>,
}

/// Componentwise mean and standard deviation of parameter estimates.
pub fn trial_statistics(estimates: &[Vec<f64>]) -> Result<TrialStatistics> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Config("no estimates to summarize".into()))?;
    let p = first.len();
    if estimates.iter().any(|e| e.len() != p) {
        return Err(Error::Dimension("estimates have different lengths".into()));
    }
    let n = estimates.len();
    let mean: Vec<f64> = (0..p)
        .map(|c| estimates.iter().map(|e| e[c]).sum::<f64>() / n as f64)
        .collect();
    let std = (n > 1).then(|| {
        (0..p)
            .map(|c| {
                let ss: f64 = estimates.iter().map(|e| (e[c] - mean[c]).powi(2)).sum();
                (ss / (n - 1) as f64).sqrt()
            })
            .collect()
    });
    Ok(TrialStatistics { n, mean, std })
}

/// Median, averaging the middle pair for even counts. `None` when empty or
/// when any value is NaN.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
