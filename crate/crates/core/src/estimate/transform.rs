//! Maps between constrained parameters and an unconstrained search space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-component bijection from the unconstrained value `u` to `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "map")]
pub enum ComponentMap {
    Identity,
    /// `θ = exp(u)`, for positive parameters.
    Log,
    /// `θ = scale · tanh(u)`, for parameters in `(−scale, scale)`.
    ScaledTanh { scale: f64 },
}

impl ComponentMap {
    pub fn to_unconstrained(&self, theta: f64) -> Result<f64> {
        let u = match *self {
            ComponentMap::Identity => theta,
            ComponentMap::Log => {
                if theta <= 0.0 {
                    return Err(Error::Config(format!("{theta} is not positive")));
                }
                theta.ln()
            }
            ComponentMap::ScaledTanh { scale } => {
                if theta.abs() >= scale {
                    return Err(Error::Config(format!("{theta} is outside (-{scale}, {scale})")));
                }
                (theta / scale).atanh()
            }
        };
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::Config(format!("{theta} has no finite unconstrained image")))
        }
    }

    pub fn to_constrained(&self, u: f64) -> f64 {
        match *self {
            ComponentMap::Identity => u,
            ComponentMap::Log => u.exp(),
            ComponentMap::ScaledTanh { scale } => scale * u.tanh(),
        }
    }

    /// `dθ/du`.
    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            ComponentMap::Identity => 1.0,
            ComponentMap::Log => u.exp(),
            ComponentMap::ScaledTanh { scale } => {
                let t = u.tanh();
                scale * (1.0 - t * t)
            }
        }
    }
}

/// Componentwise transform of a whole parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTransform {
    pub maps: Vec<ComponentMap>,
}

impl ParameterTransform {
    pub fn new(maps: Vec<ComponentMap>) -> Self {
        Self { maps }
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.maps.len() {
            return Err(Error::Dimension(format!(
                "transform has {} components, got {n}",
                self.maps.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta.len())?;
        self.maps
            .iter()
            .zip(theta)
            .map(|(m, &t)| m.to_unconstrained(t))
            .collect()
    }

    pub fn inverse(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u.len())?;
        Ok(self.maps.iter().zip(u).map(|(m, &v)| m.to_constrained(v)).collect())
    }

    /// Converts a gradient with respect to `θ` into one with respect to `u`.
    pub fn pullback_gradient(&self, u: &[f64], grad_theta: &[f64]) -> Vec<f64> {
        self.maps
            .iter()
            .zip(u)
            .zip(grad_theta)
            .map(|((m, &v), &g)| g * m.derivative(v))
            .collect()
    }
}
