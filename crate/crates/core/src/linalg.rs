//! Small dense helpers shared by the filters.
//!
//! Symmetric matrices are flattened with `vech`: the lower triangle, column by
//! column. A unit perturbation of an off-diagonal `vech` entry moves both
//! mirrored matrix entries, so Jacobians taken in `vech` coordinates stay
//! consistent with functions of symmetric matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            context: format!("{context}: non-finite entry"),
        });
    }
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
        })
}

/// Cholesky with a diagonal jitter floor. Tries the matrix as-is first.
pub fn cholesky_jittered(m: &DMatrix<f64>, jitter: f64, context: &str) -> Result<DMatrix<f64>> {
    if let Ok(l) = cholesky(m, context) {
        return Ok(l);
    }
    if jitter > 0.0 {
        let mut j = m.clone();
        for i in 0..j.nrows() {
            j[(i, i)] += jitter;
        }
        return cholesky(&j, context);
    }
    Err(Error::NotPositiveDefinite {
        context: context.to_string(),
    })
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clamped to 0).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(symmetrized(m.clone()));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Lower-triangle indices `(row, col)` in `vech` order.
pub fn vech_indices(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(vech_len(d));
    for j in 0..d {
        for i in j..d {
            out.push((i, j));
        }
    }
    out
}

pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    DVector::from_iterator(vech_len(d), vech_indices(d).into_iter().map(|(i, j)| m[(i, j)]))
}

pub fn unvech(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (k, (i, j)) in vech_indices(d).into_iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

/// Symmetric unit direction for `vech` coordinate `k`.
pub fn vech_basis(d: usize, k: usize) -> DMatrix<f64> {
    let (i, j) = vech_indices(d)[k];
    let mut m = DMatrix::zeros(d, d);
    m[(i, j)] = 1.0;
    m[(j, i)] = 1.0;
    m
}

/// Pairing of a symmetric-matrix cotangent with the `vech` coordinates.
///
/// For a scalar `f(S)` with gradient matrix `G = df/dS_ij` (entrywise, not
/// symmetrized), the derivative along `vech` coordinate `(i, j)` is
/// `G_ij + G_ji` off the diagonal and `G_ii` on it.
pub fn vech_cotangent(g: &DMatrix<f64>) -> DVector<f64> {
    let d = g.nrows();
    DVector::from_iterator(
        vech_len(d),
        vech_indices(d).into_iter().map(|(i, j)| {
            if i == j {
                g[(i, i)]
            } else {
                g[(i, j)] + g[(j, i)]
            }
        }),
    )
}

/// Differential of the lower Cholesky factor: `dL = L Φ(L⁻¹ dS L⁻ᵀ)` where
/// `Φ` keeps the strict lower triangle and halves the diagonal.
pub fn cholesky_differential(l: &DMatrix<f64>, ds: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let linv_ds = l
        .solve_lower_triangular(ds)
        .expect("cholesky factor has a nonzero diagonal");
    let x = l
        .solve_lower_triangular(&linv_ds.transpose())
        .expect("cholesky factor has a nonzero diagonal");
    let mut phi = DMatrix::zeros(d, d);
    for j in 0..d {
        phi[(j, j)] = 0.5 * x[(j, j)];
        for i in (j + 1)..d {
            phi[(i, j)] = x[(i, j)];
        }
    }
    l * phi
}

pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `log N(x | mean, L Lᵀ)` given the lower factor `L`.
pub fn gaussian_logpdf_chol(x: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let r = x - mean;
    let z = l
        .solve_lower_triangular(&r)
        .expect("cholesky factor has a nonzero diagonal");
    -0.5 * (z.norm_squared() + log_det_from_cholesky(l) + x.len() as f64 * LN_2PI)
}

pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(cov, "gaussian density")?;
    Ok(gaussian_logpdf_chol(x, mean, &l))
}

/// Inverse of `L Lᵀ` from its lower factor.
pub fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .expect("cholesky factor has a nonzero diagonal");
    symmetrized(linv.transpose() * linv)
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_square(m: &DMatrix<f64>, d: usize, name: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {d}x{d}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_len(v: &DVector<f64>, d: usize, name: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::Dimension(format!(
            "{name} has length {}, expected {d}",
            v.len()
        )));
    }
    Ok(())
}
