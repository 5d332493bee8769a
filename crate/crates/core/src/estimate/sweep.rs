use nalgebra::DVector;
use rayon::prelude::*;

use super::loglik::{loglik, FilterKind, LoglikSettings};
use crate::error::{Error, Result};
use crate::ssm::ModelFamily;

/// Log-likelihood along a one-parameter grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: FilterKind,
    pub parameter: String,
    pub grid: Vec<f64>,
    /// `None` where the filter failed.
    pub loglik: Vec<Option<f64>>,
    /// `(ℓ − min)/(max − min)` over the successful points; absent with fewer
    /// than two distinct values.
    pub normalized: Option<Vec<Option<f64>>>,
}

impl SweepResult {
    /// Grid value with the largest log-likelihood.
    pub fn argmax(&self) -> Option<f64> {
        self.grid
            .iter()
            .zip(&self.loglik)
            .filter_map(|(g, l)| l.map(|l| (*g, l)))
            .fold(None, |best: Option<(f64, f64)>, (g, l)| match best {
                Some((_, bl)) if bl >= l => best,
                _ => Some((g, l)),
            })
            .map(|(g, _)| g)
    }

    pub fn failures(&self) -> usize {
        self.loglik.iter().filter(|l| l.is_none()).count()
    }
}

/// Min-max normalization onto `[0, 1]`; missing entries stay missing.
pub fn normalize(values: &[Option<f64>]) -> Option<Vec<Option<f64>>> {
    let present = values.iter().flatten();
    let min = present.clone().copied().fold(f64::INFINITY, f64::min);
    let max = present.copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return None;
    }
    Some(
        values
            .iter()
            .map(|v| v.map(|v| if v == max { 1.0 } else { (v - min) / (max - min) }))
            .collect(),
    )
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("sweep grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `n` evenly spaced points from `start` to `stop` inclusive, with each value
/// computed as `start + i·step` and rounded to 12 decimals.
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(Error::Config(format!("bad grid {start}..{stop} step {step}")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// Evaluates `ℓ` with one parameter varied over `grid` and the others held at
/// `theta`. Every point uses the same settings, so particle filters share
/// their random numbers across the grid.
pub fn sweep_parameter(
    family: &dyn ModelFamily,
    theta: &[f64],
    parameter: &str,
    grid: &[f64],
    observations: &[DVector<f64>],
    kind: FilterKind,
    settings: &LoglikSettings,
) -> Result<SweepResult> {
    check_grid(grid)?;
    family.check_theta(theta)?;
    let idx = family.param_index(parameter)?;
    if observations.is_empty() {
        return Err(Error::Config("observation sequence is empty".into()));
    }
    let values: Vec<Option<f64>> = grid
        .par_iter()
        .map(|&g| {
            let mut t = theta.to_vec();
            t[idx] = g;
            loglik(family, &t, observations, kind, settings)
                .ok()
                .filter(|l| !l.is_nan())
        })
        .collect();
    Ok(SweepResult {
        kind,
        parameter: parameter.to_string(),
        grid: grid.to_vec(),
        normalized: normalize(&values),
        loglik: values,
    })
}

/// Leverage sweep, one result per filter kind.
pub fn sweep_rho(
    family: &dyn ModelFamily,
    theta_star: &[f64],
    rho_grid: &[f64],
    observations: &[DVector<f64>],
    kinds: &[FilterKind],
    settings: &LoglikSettings,
) -> Result<Vec<SweepResult>> {
    if rho_grid.iter().any(|r| r.abs() >= 1.0) {
        return Err(Error::Config("rho grid must lie inside (-1, 1)".into()));
    }
    kinds
        .iter()
        .map(|&k| sweep_parameter(family, theta_star, "rho", rho_grid, observations, k, settings))
        .collect()
}
