//! BFGS ascent with a backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfgsConfig {
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Sufficient-increase constant of the Armijo condition.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Length cap of the first step, taken before any curvature is known.
    pub first_step: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-5,
            max_iters: 500,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            first_step: 0.1,
        }
    }
}

impl BfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0)
            || self.max_iters == 0
            || !(self.armijo > 0.0 && self.armijo < 1.0)
            || !(self.backtrack > 0.0 && self.backtrack < 1.0)
            || !(self.first_step > 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Iterate {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: Vec<Iterate>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::GradientTolerance
    }
}

/// Objective value and, when asked for, its gradient.
pub type Evaluation = (f64, Option<DVector<f64>>);

/// Maximizes `f`. The objective is called as `f(x, need_gradient)`; errors
/// and non-finite values at trial points count as a failed step, but the
/// starting point must evaluate.
pub fn maximize<F>(mut f: F, x0: &[f64], config: &BfgsConfig) -> Result<OptimResult>
where
    F: FnMut(&DVector<f64>, bool) -> Result<Evaluation>,
{
    config.validate()?;
    let n = x0.len();
    let mut eval = |x: &DVector<f64>, need: bool| -> Option<Evaluation> {
        match f(x, need) {
            Ok((v, g)) if v.is_finite() && g.as_ref().is_none_or(|g| g.iter().all(|c| c.is_finite())) => {
                Some((v, g))
            }
            _ => None,
        }
    };

    let mut x = DVector::from_column_slice(x0);
    let (mut value, g) = eval(&x, true)
        .ok_or_else(|| Error::FlowBlowUp("objective failed at the starting point".into()))?;
    let mut grad = g.ok_or_else(|| Error::Config("objective returned no gradient".into()))?;
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut trace = vec![Iterate {
        iteration: 0,
        x: x.iter().copied().collect(),
        value,
        grad_norm: grad.amax(),
    }];
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=config.max_iters {
        if grad.amax() < config.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        iterations = iter;
        let mut dir = &hinv * &grad;
        if grad.dot(&dir) <= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = grad.clone();
        }
        let mut t = if iter == 1 {
            (config.first_step / dir.norm()).min(1.0)
        } else {
            1.0
        };
        let slope = grad.dot(&dir);
        let mut accepted = None;
        for b in 0..=config.max_backtracks {
            let trial = &x + &dir * t;
            if let Some((v, g)) = eval(&trial, b == 0) {
                if v >= value + config.armijo * t * slope {
                    accepted = Some((trial, v, g));
                    break;
                }
            }
            t *= config.backtrack;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            stop = StopReason::LineSearchFailure;
            break;
        };
        let g_new = match g_new {
            Some(g) => g,
            None => match eval(&x_new, true) {
                Some((_, Some(g))) => g,
                _ => {
                    stop = StopReason::LineSearchFailure;
                    break;
                }
            },
        };

        // Curvature pair for the minimization of −f.
        let s = &x_new - &x;
        let y = &grad - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if !scaled {
                hinv *= sy / y.norm_squared();
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        value = v_new;
        grad = g_new;
        trace.push(Iterate {
            iteration: iter,
            x: x.iter().copied().collect(),
            value,
            grad_norm: grad.amax(),
        });
    }
    if stop == StopReason::MaxIterations && grad.amax() < config.grad_tol {
        stop = StopReason::GradientTolerance;
    }
    Ok(OptimResult {
        x: x.iter().copied().collect(),
        value,
        gradient: grad.iter().copied().collect(),
        iterations,
        stop,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>, _: bool) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let v = -((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2));
        let g = DVector::from_vec(vec![
            2.0 * (1.0 - a) + 400.0 * a * (b - a * a),
            -200.0 * (b - a * a),
        ]);
        Ok((v, Some(g)))
    }

    #[test]
    fn finds_rosenbrock_optimum() {
        let r = maximize(rosenbrock, &[-1.2, 1.0], &BfgsConfig::default()).unwrap();
        assert!(r.converged(), "{:?}", r.stop);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        for w in r.trace.windows(2) {
            assert!(w[1].value >= w[0].value);
        }
    }

    #[test]
    fn quadratic_in_few_steps() {
        let f = |x: &DVector<f64>, _: bool| -> Result<Evaluation> {
            let v = -(2.0 * (x[0] - 3.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2));
            Ok((v, Some(DVector::from_vec(vec![-4.0 * (x[0] - 3.0), -(x[1] + 1.0)]))))
        };
        let r = maximize(f, &[0.0, 0.0], &BfgsConfig::default()).unwrap();
        assert!(r.converged());
        assert!(r.iterations < 20);
        assert!((r.x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn failing_region_is_avoided() {
        // Undefined for x > 2, optimum at 1.5.
        let f = |x: &DVector<f64>, _: bool| -> Result<Evaluation> {
            if x[0] > 2.0 {
                return Err(Error::Degenerate("outside".into()));
            }
            Ok((-(x[0] - 1.5).powi(2), Some(DVector::from_element(1, -2.0 * (x[0] - 1.5)))))
        };
        let cfg = BfgsConfig {
            first_step: 100.0,
            ..BfgsConfig::default()
        };
        let r = maximize(f, &[0.0], &cfg).unwrap();
        assert!((r.x[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn wrong_gradient_reports_line_search_failure() {
        let f = |x: &DVector<f64>, _: bool| -> Result<Evaluation> {
            Ok((-(x[0] * x[0]), Some(DVector::from_element(1, 1.0))))
        };
        let r = maximize(f, &[0.0], &BfgsConfig::default()).unwrap();
        assert_eq!(r.stop, StopReason::LineSearchFailure);
        assert!(!r.converged());
        assert_eq!(r.x, vec![0.0]);
    }
}
