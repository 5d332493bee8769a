#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgf_core::{make_lgssm_model, GaussianBelief, ModelDefinition};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// A random LGSSM with spectral norm of `A` at most 0.95, state dimension
/// `d` and one or two observed channels.
pub fn random_lgssm(seed: u64, d: usize) -> ModelDefinition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=2usize);
    let a = random_matrix(&mut rng, d, d);
    let norm = a.clone().svd(false, false).singular_values.max();
    let a = a * (rng.random_range(0.3..0.95) / norm.max(1e-12));
    let b = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    let bq = random_matrix(&mut rng, d, d);
    let q = &bq * bq.transpose() * 0.3 + DMatrix::identity(d, d) * 0.1;
    let h = random_matrix(&mut rng, m, d);
    let c = DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5));
    let br = random_matrix(&mut rng, m, m);
    let r = &br * br.transpose() * 0.3 + DMatrix::identity(m, m) * 0.2;
    let prior = GaussianBelief::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
    make_lgssm_model(a, b, q, h, c, r, prior).unwrap()
}

pub fn sup_norm(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

/// Point-mass filter for the bimodal random walk `x_k = x_{k−1} + N(0, 1)`,
/// `y_k = |x_k| + N(0, 1)`, `x_0 ~ N(0, δ²)` on `n` equally spaced points of
/// `[lo, hi]`. Returns the grid and the normalized filtering densities.
pub fn bimodal_grid_filter(
    observations: &[DVector<f64>],
    delta_sq: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dx = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    let normalize = |p: &mut Vec<f64>| {
        let s: f64 = p.iter().sum::<f64>() * dx;
        p.iter_mut().for_each(|v| *v /= s);
    };
    let mut p: Vec<f64> = grid.iter().map(|x| (-0.5 * x * x / delta_sq).exp()).collect();
    normalize(&mut p);
    // Unit-variance transition kernel, cut where it is below 1e-22.
    let half = (10.0 / dx).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|j| {
            let u = (j as f64 - half as f64) * dx;
            (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt() * dx
        })
        .collect();
    let mut out = Vec::with_capacity(observations.len());
    for y in observations {
        let mut pred = vec![0.0; n];
        for (i, slot) in pred.iter_mut().enumerate() {
            let lo_j = i.saturating_sub(half);
            let hi_j = (i + half).min(n - 1);
            *slot = (lo_j..=hi_j).map(|j| p[j] * kernel[j + half - i]).sum();
        }
        for (v, x) in pred.iter_mut().zip(&grid) {
            let r = y[0] - x.abs();
            *v *= (-0.5 * r * r).exp();
        }
        normalize(&mut pred);
        out.push(pred.clone());
        p = pred;
    }
    (grid, out)
}

/// Local maxima of a gridded density, highest first.
pub fn grid_modes(grid: &[f64], density: &[f64]) -> Vec<(f64, f64)> {
    let mut modes: Vec<(f64, f64)> = (1..density.len() - 1)
        .filter(|&i| density[i] > density[i - 1] && density[i] >= density[i + 1])
        .map(|i| (grid[i], density[i]))
        .collect();
    modes.sort_by(|a, b| b.1.total_cmp(&a.1));
    modes
}
