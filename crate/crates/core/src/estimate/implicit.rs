//! Gradients of the filter log-likelihood by implicit differentiation.
//!
//! Each converged innovation `z_k = (μ_k, vech Σ_k)` solves `F(z; s̄_k, θ) = 0`
//! where `F` is the quadrature flow right-hand side and `s̄_k = (m̄_k, vech P̄_k)`
//! the predictive. The Euler map is `I = z + hF`, so `Id − ∂I/∂z = −h ∂F/∂z`
//! and the adjoint of one step only needs `J_z = ∂F/∂z`:
//!
//! ```text
//! b_k  = ∂ℓ_k/∂z_k + (∂s̄_{k+1}/∂z_k)ᵀ a_{k+1}
//! λ_k  = J_z⁻ᵀ b_k
//! a_k  = ∂ℓ_k/∂s̄_k − J_sᵀ λ_k
//! ∇_θ += ∂ℓ_k/∂θ + (∂s̄_{k+1}/∂θ)ᵀ a_{k+1} − J_θᵀ λ_k
//! ```
//!
//! swept from `k = K` down to `1`, then chained through `s̄_1 = pred(prior(θ), θ)`.
//! All Jacobians are assembled from exact directional derivatives of the
//! quadrature sums, so the result is the gradient of the discretized filter.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::loglik::{loglik, FilterKind, LoglikSettings};
use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{QuadratureRule, UnitNodeSet};
use crate::ssm::{
    AffineGaussianTransition, ModelFamily, ModelSensitivity, ObservationModel,
    ObservationSensitivity,
};
use crate::vwf::{self, CovarianceForm, FlowConfig, LikelihoodRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Implicit,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub method: GradientMethod,
    /// Largest componentwise relative disagreement with central differences,
    /// when both were computed.
    pub fd_check_error: Option<f64>,
    pub fd_gradient: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOptions {
    /// Central-difference step used for the check and for the fallback.
    pub fd_step: f64,
    pub check_fd: bool,
    /// Tolerance of the iterative adjoint solve (state dimension above 3).
    pub adjoint_tol: f64,
    pub adjoint_max_iters: usize,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            check_fd: false,
            adjoint_tol: 1e-10,
            adjoint_max_iters: 100_000,
        }
    }
}

/// `max_i |a_i − b_i| / max(|b_i|, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of `ℓ` from the VWF filter.
pub fn finite_difference_gradient(
    family: &dyn ModelFamily,
    theta: &[f64],
    observations: &[DVector<f64>],
    rule: &QuadratureRule,
    config: &FlowConfig,
    step: f64,
) -> Result<Vec<f64>> {
    let settings = LoglikSettings {
        rule: rule.clone(),
        flow: config.clone(),
        ..LoglikSettings::default()
    };
    (0..theta.len())
        .map(|i| {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[i] += step;
            tm[i] -= step;
            let lp = loglik(family, &tp, observations, FilterKind::Vwf, &settings)?;
            let lm = loglik(family, &tm, observations, FilterKind::Vwf, &settings)?;
            Ok((lp - lm) / (2.0 * step))
        })
        .collect()
}

fn pack(fm: &DVector<f64>, fp: &DMatrix<f64>) -> DVector<f64> {
    let v = linalg::vech(fp);
    let mut out = DVector::zeros(fm.len() + v.len());
    out.rows_mut(0, fm.len()).copy_from(fm);
    out.rows_mut(fm.len(), v.len()).copy_from(&v);
    out
}

/// Quadrature nodes on the posterior with everything the derivatives need.
struct PosteriorNodes {
    d: usize,
    factor: DMatrix<f64>,
    units: Vec<DVector<f64>>,
    weights: Vec<f64>,
    points: Vec<DVector<f64>>,
    offsets: Vec<DVector<f64>>,
    /// `∇V(Z_j)`.
    grad_v: Vec<DVector<f64>>,
    /// `∇²V(Z_j)`.
    hess_v: Vec<DMatrix<f64>>,
    /// `P̄⁻¹ (Z_j − m̄)`.
    scaled_resid: Vec<DVector<f64>>,
}

impl PosteriorNodes {
    fn new(
        post: &GaussianBelief,
        pred: &GaussianBelief,
        prec: &DMatrix<f64>,
        y: &DVector<f64>,
        obs: &dyn ObservationModel,
        rule: &UnitNodeSet,
    ) -> Result<Self> {
        let nodes = rule.transform(post)?;
        let mut grad_v = Vec::with_capacity(rule.len());
        let mut hess_v = Vec::with_capacity(rule.len());
        let mut scaled_resid = Vec::with_capacity(rule.len());
        for x in &nodes.points {
            let q = prec * (x - &pred.mean);
            grad_v.push(&q - obs.grad_x(y, x));
            hess_v.push(prec - obs.hess_x(y, x));
            scaled_resid.push(q);
        }
        Ok(Self {
            d: post.dim(),
            units: rule.iter().map(|(u, _)| DVector::from_column_slice(u)).collect(),
            factor: nodes.factor,
            weights: nodes.weights,
            points: nodes.points,
            offsets: nodes.offsets,
            grad_v,
            hess_v,
            scaled_resid,
        })
    }

    /// Directional derivative of `(F_m, vech F_P)` given per-node changes of
    /// the node location `dZ`, the offset `dδ`, and an extra additive change
    /// of `∇V` not caused by moving the node.
    fn residual_dir(
        &self,
        dz: Option<&[DVector<f64>]>,
        ddelta: Option<&[DVector<f64>]>,
        extra: Option<&[DVector<f64>]>,
    ) -> DVector<f64> {
        let d = self.d;
        let mut dfm = DVector::zeros(d);
        let mut m = DMatrix::zeros(d, d);
        for j in 0..self.weights.len() {
            let w = self.weights[j];
            let mut dg = match dz {
                Some(dz) => &self.hess_v[j] * &dz[j],
                None => DVector::zeros(d),
            };
            if let Some(e) = extra {
                dg += &e[j];
            }
            dfm.axpy(-w, &dg, 1.0);
            m.ger(-w, &dg, &self.offsets[j], 1.0);
            if let Some(dd) = ddelta {
                m.ger(-w, &self.grad_v[j], &dd[j], 1.0);
            }
        }
        pack(&dfm, &(&m + m.transpose()))
    }

    /// Offsets `dL u_j` for every `vech` direction of the covariance.
    fn offset_directions(&self) -> Vec<Vec<DVector<f64>>> {
        let v = linalg::vech_len(self.d);
        (0..v)
            .map(|k| {
                let dl = linalg::cholesky_differential(&self.factor, &linalg::vech_basis(self.d, k));
                self.units.iter().map(|u| &dl * u).collect()
            })
            .collect()
    }
}

struct StepJacobians {
    jz: DMatrix<f64>,
    js: DMatrix<f64>,
    jt: DMatrix<f64>,
}

fn step_jacobians(
    nodes: &PosteriorNodes,
    offset_dirs: &[Vec<DVector<f64>>],
    prec: &DMatrix<f64>,
    y: &DVector<f64>,
    sens: Option<&dyn ObservationSensitivity>,
    p: usize,
) -> StepJacobians {
    let d = nodes.d;
    let v = linalg::vech_len(d);
    let n = d + v;
    let count = nodes.weights.len();
    let mut jz = DMatrix::zeros(n, n);
    let mut js = DMatrix::zeros(n, n);
    let mut jt = DMatrix::zeros(n, p);

    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        let dz = vec![e; count];
        jz.set_column(i, &nodes.residual_dir(Some(&dz), None, None));
        let extra = vec![-prec.column(i).into_owned(); count];
        js.set_column(i, &nodes.residual_dir(None, None, Some(&extra)));
    }
    for (k, dd) in offset_dirs.iter().enumerate() {
        jz.set_column(d + k, &nodes.residual_dir(Some(dd), Some(dd), None));
        let pe = prec * linalg::vech_basis(d, k);
        let extra: Vec<DVector<f64>> = nodes.scaled_resid.iter().map(|q| -(&pe * q)).collect();
        js.set_column(d + k, &nodes.residual_dir(None, None, Some(&extra)));
    }
    if let Some(sens) = sens {
        let per_node: Vec<DMatrix<f64>> =
            nodes.points.iter().map(|x| sens.dtheta_grad_x(y, x)).collect();
        for k in 0..p {
            let extra: Vec<DVector<f64>> = per_node.iter().map(|m| -m.column(k)).collect();
            jt.set_column(k, &nodes.residual_dir(None, None, Some(&extra)));
        }
    }
    StepJacobians { jz, js, jt }
}

fn softmax(a: &[f64]) -> Vec<f64> {
    let lse = linalg::log_sum_exp(a.iter().copied());
    a.iter().map(|v| (v - lse).exp()).collect()
}

/// `(∂ℓ_k/∂z_k, ∂ℓ_k/∂s̄_k, ∂ℓ_k/∂θ)` for the posterior-importance increment.
#[allow(clippy::too_many_arguments)]
fn posterior_increment_grads(
    nodes: &PosteriorNodes,
    offset_dirs: &[Vec<DVector<f64>>],
    post: &GaussianBelief,
    pred: &GaussianBelief,
    prec: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &dyn ObservationModel,
    sens: Option<&dyn ObservationSensitivity>,
    p: usize,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let d = nodes.d;
    let v = linalg::vech_len(d);
    let pred_chol = linalg::cholesky(&pred.cov, "predictive covariance")?;
    let a: Vec<f64> = (0..nodes.weights.len())
        .map(|j| {
            let x = &nodes.points[j];
            nodes.weights[j].ln()
                + obs.log_density(y, x)
                + linalg::gaussian_logpdf_chol(x, &pred.mean, &pred_chol)
                + 0.5 * nodes.units[j].norm_squared()
        })
        .collect();
    let pi = softmax(&a);
    let post_prec = linalg::inverse_from_cholesky(&nodes.factor);

    let mut lz = DVector::zeros(d + v);
    let mut ls = DVector::zeros(d + v);
    let mut lt = DVector::zeros(p);
    for (j, &pj) in pi.iter().enumerate() {
        for i in 0..d {
            lz[i] -= pj * nodes.grad_v[j][i];
            ls[i] += pj * nodes.scaled_resid[j][i];
        }
        for k in 0..v {
            lz[d + k] -= pj * nodes.grad_v[j].dot(&offset_dirs[k][j]);
            let e = linalg::vech_basis(d, k);
            ls[d + k] += pj * 0.5 * nodes.scaled_resid[j].dot(&(&e * &nodes.scaled_resid[j]));
        }
        if let Some(s) = sens {
            lt.axpy(pj, &s.dtheta_log_density(y, &nodes.points[j]), 1.0);
        }
    }
    for k in 0..v {
        let e = linalg::vech_basis(d, k);
        lz[d + k] += 0.5 * (&post_prec * &e).trace();
        ls[d + k] -= 0.5 * (prec * &e).trace();
    }
    let _ = post;
    Ok((lz, ls, lt))
}

/// `(∂ℓ_k/∂s̄_k, ∂ℓ_k/∂θ)` for the increment integrated on the predictive.
fn predictive_increment_grads(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    obs: &dyn ObservationModel,
    sens: Option<&dyn ObservationSensitivity>,
    rule: &UnitNodeSet,
    p: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = pred.dim();
    let v = linalg::vech_len(d);
    let nodes = rule.transform(pred)?;
    let a: Vec<f64> = nodes
        .points
        .iter()
        .zip(&nodes.weights)
        .map(|(x, w)| w.ln() + obs.log_density(y, x))
        .collect();
    let pi = softmax(&a);
    let dls: Vec<DMatrix<f64>> = (0..v)
        .map(|k| linalg::cholesky_differential(&nodes.factor, &linalg::vech_basis(d, k)))
        .collect();
    let mut ls = DVector::zeros(d + v);
    let mut lt = DVector::zeros(p);
    for (j, ((u, _), x)) in rule.iter().zip(&nodes.points).enumerate() {
        let g = obs.grad_x(y, x);
        let u = DVector::from_column_slice(u);
        for i in 0..d {
            ls[i] += pi[j] * g[i];
        }
        for k in 0..v {
            ls[d + k] += pi[j] * g.dot(&(&dls[k] * &u));
        }
        if let Some(s) = sens {
            lt.axpy(pi[j], &s.dtheta_log_density(y, x), 1.0);
        }
    }
    Ok((ls, lt))
}

/// `(∂s̄'/∂z, ∂s̄'/∂θ)` for `s̄' = (A μ + b, vech(A Σ Aᵀ + Q))`.
fn prediction_jacobians(
    belief: &GaussianBelief,
    t: &AffineGaussianTransition,
    sens: &ModelSensitivity,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = belief.dim();
    let v = linalg::vech_len(d);
    let n = d + v;
    let p = sens.n_params();
    let mut pz = DMatrix::zeros(n, n);
    for i in 0..d {
        let col = t.a.column(i).into_owned();
        pz.view_mut((0, i), (d, 1)).copy_from(&col);
    }
    for k in 0..v {
        let dp = &t.a * linalg::vech_basis(d, k) * t.a.transpose();
        pz.view_mut((d, d + k), (v, 1)).copy_from(&linalg::vech(&dp));
    }
    let mut pt = DMatrix::zeros(n, p);
    for (k, td) in sens.transition.iter().enumerate() {
        let dm = &td.a * &belief.mean + &td.b;
        let asa = &td.a * &belief.cov * t.a.transpose();
        let dp = &asa + asa.transpose() + &td.q;
        pt.set_column(k, &pack(&dm, &dp));
    }
    (pz, pt)
}

fn stable_eigenvalues(jz: &DMatrix<f64>) -> std::result::Result<Vec<nalgebra::Complex<f64>>, String> {
    let eig: Vec<_> = jz.clone().complex_eigenvalues().iter().copied().collect();
    if let Some(bad) = eig.iter().find(|l| !(l.re < 0.0)) {
        return Err(format!("fixed-point Jacobian has eigenvalue {bad} with non-negative real part"));
    }
    Ok(eig)
}

/// Solves `J_zᵀ λ = b`, directly for small systems and otherwise by iterating
/// the adjoint of the Euler map with a step that makes it a contraction.
fn adjoint_solve(
    jz: &DMatrix<f64>,
    b: &DVector<f64>,
    d: usize,
    opts: &GradientOptions,
) -> std::result::Result<DVector<f64>, String> {
    let eig = stable_eigenvalues(jz)?;
    if d <= 3 {
        return jz
            .transpose()
            .lu()
            .solve(b)
            .ok_or_else(|| "fixed-point Jacobian is singular".to_string());
    }
    let h = eig
        .iter()
        .map(|l| -l.re / l.norm_sqr())
        .fold(f64::INFINITY, f64::min);
    let m = DMatrix::identity(jz.nrows(), jz.ncols()) + jz * h;
    let mt = m.transpose();
    let mut mu = b.clone();
    for _ in 0..opts.adjoint_max_iters {
        let next = b + &mt * &mu;
        let change = (&next - &mu).amax();
        mu = next;
        if change < opts.adjoint_tol * mu.amax().max(1.0) {
            return Ok(-mu * h);
        }
    }
    Err("adjoint iteration did not converge".into())
}

/// `∇_θ ℓ` of the VWF filter by implicit differentiation of every innovation.
///
/// Falls back to central differences (recording why in `warnings`) when the
/// fixed-point Jacobian is not stable or the adjoint solve fails.
pub fn implicit_gradient(
    family: &dyn ModelFamily,
    theta: &[f64],
    observations: &[DVector<f64>],
    rule: &QuadratureRule,
    config: &FlowConfig,
    opts: &GradientOptions,
) -> Result<GradientReport> {
    let model = family.build(theta).map_err(|e| e.at_theta(theta))?;
    let nodes = rule.build(model.dim())?;
    let run = vwf::filter_with_nodes(&model, observations, &nodes, config)
        .map_err(|e| e.at_theta(theta))?;
    let mut warnings = Vec::new();
    if !run.all_converged() {
        warnings.push(format!(
            "{} of {} innovations did not converge",
            run.steps() - run.converged_steps(),
            run.steps()
        ));
    }

    let implicit = if config.covariance_form == CovarianceForm::Hessian {
        Err("implicit gradient is derived for the Stein covariance form".to_string())
    } else {
        let sens = family.sensitivity(theta).map_err(|e| e.at_theta(theta))?;
        adjoint_sweep(&model, &sens, observations, &nodes, config, &run, opts)
            .map_err(|e| e.at_theta(theta))?
    };

    let fd = |warnings: &mut Vec<String>| -> Result<Vec<f64>> {
        let g = finite_difference_gradient(family, theta, observations, rule, config, opts.fd_step)?;
        if g.iter().any(|v| !v.is_finite()) {
            warnings.push("finite-difference gradient is not finite".into());
        }
        Ok(g)
    };
    match implicit {
        Ok(gradient) => {
            let (fd_gradient, fd_check_error) = if opts.check_fd {
                let g = fd(&mut warnings)?;
                let err = relative_error(&gradient, &g);
                (Some(g), Some(err))
            } else {
                (None, None)
            };
            Ok(GradientReport {
                loglik: run.loglik,
                gradient,
                method: GradientMethod::Implicit,
                fd_check_error,
                fd_gradient,
                warnings,
            })
        }
        Err(reason) => {
            warnings.push(format!("fell back to finite differences: {reason}"));
            let g = fd(&mut warnings)?;
            Ok(GradientReport {
                loglik: run.loglik,
                fd_gradient: Some(g.clone()),
                gradient: g,
                method: GradientMethod::FiniteDifference,
                fd_check_error: None,
                warnings,
            })
        }
    }
}

/// Reverse sweep over a completed run. The outer `Err` is a hard failure, the
/// inner one a reason to fall back to finite differences.
fn adjoint_sweep(
    model: &crate::ssm::ModelDefinition,
    sens: &ModelSensitivity,
    observations: &[DVector<f64>],
    rule: &UnitNodeSet,
    config: &FlowConfig,
    run: &vwf::FilterRun,
    opts: &GradientOptions,
) -> Result<std::result::Result<Vec<f64>, String>> {
    let d = model.dim();
    let p = sens.n_params();
    let n = d + linalg::vech_len(d);
    let obs = model.observation.as_ref();
    let obs_sens = sens.observation.as_deref();
    let k_total = observations.len();

    let mut a_next = DVector::zeros(n);
    let mut g = DVector::zeros(p);
    for k in (1..=k_total).rev() {
        let y = &observations[k - 1];
        let pred = &run.predicted[k - 1];
        let post = &run.filtered[k - 1];
        let mut step = || -> Result<std::result::Result<DVector<f64>, String>> {
            let pred_chol = linalg::cholesky(&pred.cov, "predictive covariance")?;
            let prec = linalg::inverse_from_cholesky(&pred_chol);
            let pn = PosteriorNodes::new(post, pred, &prec, y, obs, rule)?;
            let dirs = pn.offset_directions();

            let (lz, ls, lt) = match config.likelihood {
                LikelihoodRule::PosteriorImportance => posterior_increment_grads(
                    &pn, &dirs, post, pred, &prec, y, obs, obs_sens, p,
                )?,
                LikelihoodRule::Predictive => {
                    let (ls, lt) = predictive_increment_grads(pred, y, obs, obs_sens, rule, p)?;
                    (DVector::zeros(n), ls, lt)
                }
            };
            let mut b = lz;
            if k < k_total {
                let (pz, pt) = prediction_jacobians(post, &model.transition_at(k), sens);
                b += pz.transpose() * &a_next;
                g += pt.transpose() * &a_next;
            }
            let jac = step_jacobians(&pn, &dirs, &prec, y, obs_sens, p);
            let lambda = match adjoint_solve(&jac.jz, &b, d, opts) {
                Ok(l) => l,
                Err(reason) => return Ok(Err(format!("step {k}: {reason}"))),
            };
            g += lt - jac.jt.transpose() * &lambda;
            Ok(Ok(ls - jac.js.transpose() * &lambda))
        };
        match step().map_err(|e| e.at_step(k))? {
            Ok(a) => a_next = a,
            Err(reason) => return Ok(Err(reason)),
        }
    }

    let (pz, pt) = prediction_jacobians(&model.prior, &model.transition_at(0), sens);
    let mut dz0 = DMatrix::zeros(n, p);
    for k in 0..p {
        dz0.set_column(k, &pack(&sens.prior_mean[k], &sens.prior_cov[k]));
    }
    g += (pz * dz0 + pt).transpose() * &a_next;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::FlowBlowUp("non-finite implicit gradient".into()));
    }
    Ok(Ok(g.iter().copied().collect()))
}
