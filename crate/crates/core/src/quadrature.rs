//! Expectations under a multivariate Gaussian.
//!
//! A [`UnitNodeSet`] holds nodes for `N(0, I_d)`; [`expect`] maps them through
//! `m + L z` with `L` the lower Cholesky factor of the covariance. Gauss–Hermite
//! rules are tensor products of the 1-D probabilists' rule, computed with the
//! Golub–Welsch eigenvalue method and then forced to be exactly symmetric.
//! Node `j` and node `n - 1 - j` are mirror images in every dimension.
//!
//! Monte Carlo rules draw standard normals from a seeded ChaCha stream. A single
//! node set is reused for every integral of a step (common random numbers).

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    GaussHermite,
    MonteCarlo,
}

/// Recipe for a node set. `order` applies to Gauss–Hermite, `sample_count`
/// and `seed` to Monte Carlo.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub kind: QuadratureKind,
    pub order: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub node_cap: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss_hermite(DEFAULT_ORDER)
    }
}

impl QuadratureRule {
    pub fn gauss_hermite(order: usize) -> Self {
        Self {
            kind: QuadratureKind::GaussHermite,
            order,
            sample_count: 0,
            seed: 0,
            node_cap: DEFAULT_NODE_CAP,
        }
    }

    pub fn monte_carlo(sample_count: usize, seed: u64) -> Self {
        Self {
            kind: QuadratureKind::MonteCarlo,
            order: 0,
            sample_count,
            seed,
            node_cap: DEFAULT_NODE_CAP,
        }
    }

    pub fn build(&self, dim: usize) -> Result<UnitNodeSet> {
        match self.kind {
            QuadratureKind::GaussHermite => build_gauss_hermite(self.order, dim, self.node_cap),
            QuadratureKind::MonteCarlo => {
                build_monte_carlo(self.sample_count, dim, self.seed, self.node_cap)
            }
        }
    }
}

/// Nodes and weights for expectations under `N(0, I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitNodeSet {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl UnitNodeSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.nodes
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    /// Nodes mapped onto `N(mean, cov)`.
    pub fn transform(&self, belief: &GaussianBelief) -> Result<TransformedNodes> {
        let l = linalg::cholesky(&belief.cov, "quadrature covariance")?;
        Ok(self.transform_with_factor(&belief.mean, l))
    }

    pub fn transform_with_factor(&self, mean: &DVector<f64>, factor: DMatrix<f64>) -> TransformedNodes {
        let d = self.dim;
        let mut offsets = Vec::with_capacity(self.len());
        let mut points = Vec::with_capacity(self.len());
        for (u, _) in self.iter() {
            let mut off = DVector::zeros(d);
            for i in 0..d {
                let mut acc = 0.0;
                for k in 0..=i {
                    acc += factor[(i, k)] * u[k];
                }
                off[i] = acc;
            }
            points.push(mean + &off);
            offsets.push(off);
        }
        TransformedNodes {
            factor,
            points,
            offsets,
            weights: self.weights.clone(),
        }
    }
}

/// Nodes of a [`UnitNodeSet`] placed on a particular Gaussian.
#[derive(Debug, Clone)]
pub struct TransformedNodes {
    /// Lower Cholesky factor `L` of the covariance.
    pub factor: DMatrix<f64>,
    /// `m + L z_j`.
    pub points: Vec<DVector<f64>>,
    /// `L z_j`.
    pub offsets: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

/// Value types that can be averaged over nodes.
pub trait Moment: Sized {
    fn scaled(&self, w: f64) -> Self;
    fn add_scaled(&mut self, w: f64, other: &Self);
    fn all_finite(&self) -> bool;
}

impl Moment for f64 {
    fn scaled(&self, w: f64) -> Self {
        w * self
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += w * other;
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Moment for DVector<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        self.axpy(w, other, 1.0);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Moment for DMatrix<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, w: f64, other: &Self) {
        *self += other * w;
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// `Σ_j w_j f(m + L z_j)`.
pub fn expect<T, F>(f: F, belief: &GaussianBelief, rule: &UnitNodeSet) -> Result<T>
where
    T: Moment,
    F: FnMut(&DVector<f64>) -> T,
{
    if belief.dim() != rule.dim() {
        return Err(Error::Dimension(format!(
            "belief has dimension {}, rule {}",
            belief.dim(),
            rule.dim()
        )));
    }
    let nodes = rule.transform(belief)?;
    expect_on(f, &nodes)
}

pub fn expect_on<T, F>(mut f: F, nodes: &TransformedNodes) -> Result<T>
where
    T: Moment,
    F: FnMut(&DVector<f64>) -> T,
{
    let mut acc: Option<T> = None;
    for (x, &w) in nodes.points.iter().zip(&nodes.weights) {
        let v = f(x);
        if !v.all_finite() {
            return Err(Error::NonFiniteIntegrand {
                node: x.iter().copied().collect(),
            });
        }
        match acc.as_mut() {
            Some(a) => a.add_scaled(w, &v),
            None => acc = Some(v.scaled(w)),
        }
    }
    acc.ok_or_else(|| Error::Config("empty node set".into()))
}

/// Probabilists' Gauss–Hermite nodes and normalized weights in 1-D.
pub fn gauss_hermite_1d(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::Config("Gauss-Hermite order must be at least 1".into()));
    }
    if order == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

fn build_gauss_hermite(order: usize, dim: usize, cap: usize) -> Result<UnitNodeSet> {
    if dim == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    if order == 0 {
        return Err(Error::Config("Gauss-Hermite order must be at least 1".into()));
    }
    let total = (order as u128).checked_pow(dim as u32).unwrap_or(u128::MAX);
    if total > cap as u128 {
        return Err(Error::RuleTooLarge { nodes: total, cap });
    }
    let total = total as usize;
    let (x1, w1) = gauss_hermite_1d(order)?;

    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    for _ in 0..total {
        let mut w = 1.0;
        for &i in &index {
            nodes.push(x1[i]);
            w *= w1[i];
        }
        weights.push(w);
        // Lexicographic increment, last axis fastest.
        for axis in (0..dim).rev() {
            index[axis] += 1;
            if index[axis] < order {
                break;
            }
            index[axis] = 0;
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(UnitNodeSet {
        dim,
        nodes,
        weights,
    })
}

fn build_monte_carlo(samples: usize, dim: usize, seed: u64, cap: usize) -> Result<UnitNodeSet> {
    if dim == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    if samples == 0 {
        return Err(Error::Config("Monte Carlo sample count must be at least 1".into()));
    }
    if samples > cap {
        return Err(Error::RuleTooLarge {
            nodes: samples as u128,
            cap,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<f64> = (0..samples * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(UnitNodeSet {
        dim,
        nodes,
        weights: vec![1.0 / samples as f64; samples],
    })
}
