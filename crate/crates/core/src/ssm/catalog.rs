//! The concrete models: stochastic volatility with leverage, the bimodal
//! absolute-value model, and the linear Gaussian model used as an oracle.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{
    AffineGaussianTransition, EkfLinearization, LinearObservation, ModelDefinition, ModelFamily,
    ModelSensitivity, ObservationModel, ObservationSensitivity,
    TransitionSchedule,
};
use crate::baselines::pf::{ParticleModel, SvParticleModel};
use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::estimate::transform::ComponentMap;
use crate::linalg::{self, LN_2PI};

fn normal(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Stochastic volatility with leverage

/// Parameters of the leverage stochastic volatility model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SVParameters {
    pub mu: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub rho: f64,
}

impl SVParameters {
    pub fn new(mu: f64, alpha: f64, sigma: f64, rho: f64) -> Result<Self> {
        if !(mu.is_finite() && alpha.is_finite() && sigma.is_finite() && rho.is_finite()) {
            return Err(Error::Config("SV parameters must be finite".into()));
        }
        if alpha.abs() >= 1.0 {
            return Err(Error::Config(format!("|alpha| must be < 1, got {alpha}")));
        }
        if sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
        }
        if rho.abs() == 1.0 {
            return Err(Error::Degenerate(
                "|rho| = 1 leaves no observation noise".into(),
            ));
        }
        if rho.abs() > 1.0 {
            return Err(Error::Config(format!("|rho| must be < 1, got {rho}")));
        }
        Ok(Self {
            mu,
            alpha,
            sigma,
            rho,
        })
    }

    /// `μ = 0.5, α = 0.975, σ² = 0.02, ρ = −0.8`.
    pub fn reference() -> Self {
        Self {
            mu: 0.5,
            alpha: 0.975,
            sigma: 0.02f64.sqrt(),
            rho: -0.8,
        }
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        match theta {
            [mu, alpha, sigma, rho] => Self::new(*mu, *alpha, *sigma, *rho),
            _ => Err(Error::Dimension(format!(
                "SV takes 4 parameters, got {}",
                theta.len()
            ))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.mu, self.alpha, self.sigma, self.rho]
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (1.0 - self.alpha * self.alpha)
    }
}

/// `Y = exp(x/2) (ρ ε + √(1−ρ²) r)` on the augmented state `[x, ε]`, i.e.
/// `Y | x, ε ~ N(exp(x/2) ρ ε, exp(x) (1−ρ²))`.
#[derive(Debug, Clone, Copy)]
pub struct SvObservation {
    rho: f64,
}

impl SvObservation {
    pub fn new(rho: f64) -> Self {
        Self { rho }
    }

    /// `(u, r, s)` with `u = y e^{-x/2}`, `r = u − ρε`, `s = 1 − ρ²`.
    fn parts(&self, y: &DVector<f64>, x: &DVector<f64>) -> (f64, f64, f64) {
        let u = y[0] * (-0.5 * x[0]).exp();
        (u, u - self.rho * x[1], 1.0 - self.rho * self.rho)
    }
}

impl ObservationModel for SvObservation {
    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let (_, r, s) = self.parts(y, x);
        -0.5 * (LN_2PI + x[0] + s.ln() + r * r / s)
    }

    fn grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let (u, r, s) = self.parts(y, x);
        DVector::from_vec(vec![-0.5 + r * u / (2.0 * s), self.rho * r / s])
    }

    fn hess_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let (u, r, s) = self.parts(y, x);
        let cross = -self.rho * u / (2.0 * s);
        DMatrix::from_row_slice(
            2,
            2,
            &[-u * (u + r) / (4.0 * s), cross, cross, -self.rho * self.rho / s],
        )
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let noise = self.rho * x[1] + (1.0 - self.rho * self.rho).sqrt() * normal(rng);
        DVector::from_element(1, (0.5 * x[0]).exp() * noise)
    }
}

/// Sensitivity of [`SvObservation`] for the parameter order `(μ, α, σ, ρ)`.
#[derive(Debug, Clone, Copy)]
struct SvObservationSensitivity {
    obs: SvObservation,
}

impl ObservationSensitivity for SvObservationSensitivity {
    fn dtheta_log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let rho = self.obs.rho;
        let (_, r, s) = self.obs.parts(y, x);
        let d_rho = rho / s + r * x[1] / s - rho * r * r / (s * s);
        DVector::from_vec(vec![0.0, 0.0, 0.0, d_rho])
    }

    fn dtheta_grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let rho = self.obs.rho;
        let (u, r, s) = self.obs.parts(y, x);
        let d_ratio = (-x[1] * s + 2.0 * rho * r) / (s * s);
        let mut m = DMatrix::zeros(2, 4);
        m[(0, 3)] = 0.5 * u * d_ratio;
        m[(1, 3)] = r / s + rho * d_ratio;
        m
    }
}

/// EKF view of the SV observation: mean `exp(x/2) ρ ε`, variance `exp(x)(1−ρ²)`.
#[derive(Debug, Clone, Copy)]
pub struct SvLinearization {
    rho: f64,
}

impl EkfLinearization for SvLinearization {
    fn obs_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, (0.5 * x[0]).exp() * self.rho * x[1])
    }

    fn obs_mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let e = (0.5 * x[0]).exp();
        DMatrix::from_row_slice(1, 2, &[0.5 * e * self.rho * x[1], e * self.rho])
    }

    fn obs_noise_cov(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x[0].exp() * (1.0 - self.rho * self.rho))
    }
}

/// Builds the augmented two-dimensional SV model on `ζ = [x, ε]`.
///
/// The prior puts `x_0` at its stationary AR(1) law and `ε_0 ~ N(0, 1)`
/// independently.
pub fn make_sv_model(params: SVParameters) -> Result<ModelDefinition> {
    let p = SVParameters::new(params.mu, params.alpha, params.sigma, params.rho)?;
    let a = DMatrix::from_row_slice(2, 2, &[p.alpha, p.sigma, 0.0, 0.0]);
    let b = DVector::from_vec(vec![p.mu * (1.0 - p.alpha), 0.0]);
    let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
    let prior = GaussianBelief::new(
        DVector::from_vec(vec![p.mu, 0.0]),
        DMatrix::from_row_slice(2, 2, &[p.stationary_variance(), 0.0, 0.0, 1.0]),
    )?;
    Ok(ModelDefinition {
        name: "sv".into(),
        prior,
        transition: TransitionSchedule::Constant(AffineGaussianTransition::new(a, b, q)?),
        observation: Arc::new(SvObservation::new(p.rho)),
        linear_observation: None,
        linearization: Some(Arc::new(SvLinearization { rho: p.rho })),
        theta: vec![
            ("mu".into(), p.mu),
            ("alpha".into(), p.alpha),
            ("sigma".into(), p.sigma),
            ("rho".into(), p.rho),
        ],
    })
}

/// SV models indexed by `(μ, α, σ, ρ)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SvFamily;

impl ModelFamily for SvFamily {
    fn name(&self) -> &str {
        "sv"
    }

    fn param_names(&self) -> Vec<String> {
        ["mu", "alpha", "sigma", "rho"].map(String::from).to_vec()
    }

    fn build(&self, theta: &[f64]) -> Result<ModelDefinition> {
        make_sv_model(SVParameters::from_slice(theta)?)
    }

    fn sensitivity(&self, theta: &[f64]) -> Result<ModelSensitivity> {
        let p = SVParameters::from_slice(theta)?;
        let mut sens = ModelSensitivity::zeros(2, 4);
        let one_minus_a2 = 1.0 - p.alpha * p.alpha;

        sens.prior_mean[0][0] = 1.0;
        sens.prior_cov[1][(0, 0)] = 2.0 * p.alpha * p.sigma * p.sigma / one_minus_a2.powi(2);
        sens.prior_cov[2][(0, 0)] = 2.0 * p.sigma / one_minus_a2;

        sens.transition[0].b[0] = 1.0 - p.alpha;
        sens.transition[1].a[(0, 0)] = 1.0;
        sens.transition[1].b[0] = -p.mu;
        sens.transition[2].a[(0, 1)] = 1.0;

        sens.observation = Some(Arc::new(SvObservationSensitivity {
            obs: SvObservation::new(p.rho),
        }));
        Ok(sens)
    }

    fn transforms(&self) -> Vec<ComponentMap> {
        vec![
            ComponentMap::Identity,
            ComponentMap::ScaledTanh { scale: 1.0 },
            ComponentMap::Log,
            ComponentMap::ScaledTanh { scale: 1.0 },
        ]
    }

    fn particle_model(&self, theta: &[f64]) -> Result<Box<dyn ParticleModel>> {
        Ok(Box::new(SvParticleModel::new(SVParameters::from_slice(theta)?)))
    }
}

// ---------------------------------------------------------------------------
// Bimodal absolute-value model

/// `Y = |x| + η`, `η ~ N(0, 1)`. Derivatives use `sign(0) = 0` and the
/// almost-everywhere second derivative of `|x|` (zero).
#[derive(Debug, Clone, Copy, Default)]
pub struct BimodalObservation;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl ObservationModel for BimodalObservation {
    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let r = y[0] - x[0].abs();
        -0.5 * (LN_2PI + r * r)
    }

    fn grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, (y[0] - x[0].abs()) * sign(x[0]))
    }

    fn hess_x(&self, _y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let s = sign(x[0]);
        DMatrix::from_element(1, 1, -s * s)
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_element(1, x[0].abs() + normal(rng))
    }
}

#[derive(Debug, Clone, Copy)]
struct BimodalLinearization;

impl EkfLinearization for BimodalLinearization {
    fn obs_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0].abs())
    }

    fn obs_mean_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, sign(x[0]))
    }

    fn obs_noise_cov(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
}

/// Random walk observed through its absolute value, `x_0 ~ N(0, δ²)`.
pub fn make_bimodal_model(delta_sq: f64) -> Result<ModelDefinition> {
    if !(delta_sq > 0.0 && delta_sq.is_finite()) {
        return Err(Error::Config(format!("delta_sq must be > 0, got {delta_sq}")));
    }
    let one = DMatrix::identity(1, 1);
    Ok(ModelDefinition {
        name: "bimodal".into(),
        prior: GaussianBelief::scalar(0.0, delta_sq),
        transition: TransitionSchedule::Constant(AffineGaussianTransition::new(
            one.clone(),
            DVector::zeros(1),
            one,
        )?),
        observation: Arc::new(BimodalObservation),
        linear_observation: None,
        linearization: Some(Arc::new(BimodalLinearization)),
        theta: vec![("delta_sq".into(), delta_sq)],
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BimodalFamily;

impl ModelFamily for BimodalFamily {
    fn name(&self) -> &str {
        "bimodal"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["delta_sq".into()]
    }

    fn build(&self, theta: &[f64]) -> Result<ModelDefinition> {
        self.check_theta(theta)?;
        make_bimodal_model(theta[0])
    }

    fn sensitivity(&self, theta: &[f64]) -> Result<ModelSensitivity> {
        self.check_theta(theta)?;
        let mut sens = ModelSensitivity::zeros(1, 1);
        sens.prior_cov[0][(0, 0)] = 1.0;
        Ok(sens)
    }

    fn transforms(&self) -> Vec<ComponentMap> {
        vec![ComponentMap::Log]
    }
}

// ---------------------------------------------------------------------------
// Linear Gaussian model

/// `y | x ~ N(H x + c, R)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianObservation {
    h: DMatrix<f64>,
    c: DVector<f64>,
    r_chol: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    log_norm: f64,
}

impl LinearGaussianObservation {
    pub fn new(h: DMatrix<f64>, c: DVector<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let m = h.nrows();
        linalg::check_len(&c, m, "c")?;
        linalg::check_square(r, m, "R")?;
        let r_chol = linalg::cholesky(r, "observation noise R")?;
        let r_inv = linalg::inverse_from_cholesky(&r_chol);
        let log_norm = -0.5 * (linalg::log_det_from_cholesky(&r_chol) + m as f64 * LN_2PI);
        Ok(Self {
            h,
            c,
            r_chol,
            r_inv,
            log_norm,
        })
    }

    fn residual(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        y - &self.h * x - &self.c
    }
}

impl ObservationModel for LinearGaussianObservation {
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let e = self.residual(y, x);
        self.log_norm - 0.5 * e.dot(&(&self.r_inv * &e))
    }

    fn grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.h.tr_mul(&(&self.r_inv * self.residual(y, x)))
    }

    fn hess_x(&self, _y: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        -self.h.tr_mul(&(&self.r_inv * &self.h))
    }

    fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let noise = DVector::from_iterator(self.h.nrows(), (0..self.h.nrows()).map(|_| normal(rng)));
        &self.h * x + &self.c + &self.r_chol * noise
    }
}

impl EkfLinearization for LinearGaussianObservation {
    fn obs_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.c
    }

    fn obs_mean_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }

    fn obs_noise_cov(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        &self.r_chol * self.r_chol.transpose()
    }
}

/// Builds a linear Gaussian state-space model.
#[allow(clippy::too_many_arguments)]
pub fn make_lgssm_model(
    a: DMatrix<f64>,
    b: DVector<f64>,
    q: DMatrix<f64>,
    h: DMatrix<f64>,
    c: DVector<f64>,
    r: DMatrix<f64>,
    prior: GaussianBelief,
) -> Result<ModelDefinition> {
    let d = prior.dim();
    linalg::check_square(&a, d, "A")?;
    if h.ncols() != d {
        return Err(Error::Dimension(format!(
            "H has {} columns, expected {d}",
            h.ncols()
        )));
    }
    let transition = AffineGaussianTransition::new(a, b, q)?;
    let obs = LinearGaussianObservation::new(h.clone(), c.clone(), &r)?;
    let obs = Arc::new(obs);
    Ok(ModelDefinition {
        name: "lgssm".into(),
        prior,
        transition: TransitionSchedule::Constant(transition),
        observation: obs.clone(),
        linear_observation: Some(LinearObservation { h, c, r }),
        linearization: Some(obs),
        theta: Vec::new(),
    })
}

/// All matrices of a linear Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssmSpec {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl LgssmSpec {
    /// One-dimensional model from scalars.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a: f64, b: f64, q: f64, h: f64, c: f64, r: f64, m0: f64, p0: f64) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let v = |v: f64| DVector::from_element(1, v);
        Self {
            a: s(a),
            b: v(b),
            q: s(q),
            h: s(h),
            c: v(c),
            r: s(r),
            m0: v(m0),
            p0: s(p0),
        }
    }

    pub fn build(&self) -> Result<ModelDefinition> {
        make_lgssm_model(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.h.clone(),
            self.c.clone(),
            self.r.clone(),
            GaussianBelief::new(self.m0.clone(), self.p0.clone())?,
        )
    }
}

/// One free scalar of a linear Gaussian model (zero-based indices).
/// `Q` and `R` entries are set symmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgssmParam {
    A(usize, usize),
    B(usize),
    Q(usize, usize),
    H(usize, usize),
    C(usize),
    R(usize, usize),
}

impl LgssmParam {
    pub fn name(&self) -> String {
        match *self {
            LgssmParam::A(i, j) => format!("a{}{}", i + 1, j + 1),
            LgssmParam::B(i) => format!("b{}", i + 1),
            LgssmParam::Q(i, j) => format!("q{}{}", i + 1, j + 1),
            LgssmParam::H(i, j) => format!("h{}{}", i + 1, j + 1),
            LgssmParam::C(i) => format!("c{}", i + 1),
            LgssmParam::R(i, j) => format!("r{}{}", i + 1, j + 1),
        }
    }

    fn set(&self, spec: &mut LgssmSpec, v: f64) {
        match *self {
            LgssmParam::A(i, j) => spec.a[(i, j)] = v,
            LgssmParam::B(i) => spec.b[i] = v,
            LgssmParam::Q(i, j) => {
                spec.q[(i, j)] = v;
                spec.q[(j, i)] = v;
            }
            LgssmParam::H(i, j) => spec.h[(i, j)] = v,
            LgssmParam::C(i) => spec.c[i] = v,
            LgssmParam::R(i, j) => {
                spec.r[(i, j)] = v;
                spec.r[(j, i)] = v;
            }
        }
    }

    fn get(&self, spec: &LgssmSpec) -> f64 {
        match *self {
            LgssmParam::A(i, j) => spec.a[(i, j)],
            LgssmParam::B(i) => spec.b[i],
            LgssmParam::Q(i, j) => spec.q[(i, j)],
            LgssmParam::H(i, j) => spec.h[(i, j)],
            LgssmParam::C(i) => spec.c[i],
            LgssmParam::R(i, j) => spec.r[(i, j)],
        }
    }
}

fn sym_unit(d: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    m[(i, j)] = 1.0;
    m[(j, i)] = 1.0;
    m
}

/// Linear Gaussian models with a chosen subset of free entries.
#[derive(Debug, Clone)]
pub struct LgssmFamily {
    pub base: LgssmSpec,
    pub free: Vec<LgssmParam>,
}

impl LgssmFamily {
    pub fn new(base: LgssmSpec, free: Vec<LgssmParam>) -> Self {
        Self { base, free }
    }

    pub fn spec(&self, theta: &[f64]) -> Result<LgssmSpec> {
        self.check_theta(theta)?;
        let mut spec = self.base.clone();
        for (p, &v) in self.free.iter().zip(theta) {
            p.set(&mut spec, v);
        }
        Ok(spec)
    }

    pub fn base_theta(&self) -> Vec<f64> {
        self.free.iter().map(|p| p.get(&self.base)).collect()
    }
}

impl ModelFamily for LgssmFamily {
    fn name(&self) -> &str {
        "lgssm"
    }

    fn param_names(&self) -> Vec<String> {
        self.free.iter().map(LgssmParam::name).collect()
    }

    fn build(&self, theta: &[f64]) -> Result<ModelDefinition> {
        let mut model = self.spec(theta)?.build()?;
        model.theta = self.param_names().into_iter().zip(theta.iter().copied()).collect();
        Ok(model)
    }

    fn sensitivity(&self, theta: &[f64]) -> Result<ModelSensitivity> {
        let spec = self.spec(theta)?;
        let d = spec.m0.len();
        let mut sens = ModelSensitivity::zeros(d, self.free.len());
        let mut obs_dependent = false;
        for (k, p) in self.free.iter().enumerate() {
            match *p {
                LgssmParam::A(i, j) => sens.transition[k].a[(i, j)] = 1.0,
                LgssmParam::B(i) => sens.transition[k].b[i] = 1.0,
                LgssmParam::Q(i, j) => sens.transition[k].q = sym_unit(d, i, j),
                LgssmParam::H(..) | LgssmParam::C(_) | LgssmParam::R(..) => obs_dependent = true,
            }
        }
        if obs_dependent {
            sens.observation = Some(Arc::new(LgssmObservationSensitivity::new(
                &spec,
                self.free.clone(),
            )?));
        }
        Ok(sens)
    }

    fn transforms(&self) -> Vec<ComponentMap> {
        self.free
            .iter()
            .map(|p| match *p {
                LgssmParam::Q(i, j) | LgssmParam::R(i, j) if i == j => ComponentMap::Log,
                _ => ComponentMap::Identity,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct LgssmObservationSensitivity {
    h: DMatrix<f64>,
    c: DVector<f64>,
    r_inv: DMatrix<f64>,
    free: Vec<LgssmParam>,
}

impl LgssmObservationSensitivity {
    fn new(spec: &LgssmSpec, free: Vec<LgssmParam>) -> Result<Self> {
        let l = linalg::cholesky(&spec.r, "observation noise R")?;
        Ok(Self {
            h: spec.h.clone(),
            c: spec.c.clone(),
            r_inv: linalg::inverse_from_cholesky(&l),
            free,
        })
    }
}

impl ObservationSensitivity for LgssmObservationSensitivity {
    fn dtheta_log_density(&self, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let e = y - &self.h * x - &self.c;
        let se = &self.r_inv * &e;
        let m = self.h.nrows();
        DVector::from_iterator(
            self.free.len(),
            self.free.iter().map(|p| match *p {
                LgssmParam::C(i) => se[i],
                LgssmParam::H(i, j) => se[i] * x[j],
                LgssmParam::R(i, j) => {
                    let dr = sym_unit(m, i, j);
                    0.5 * se.dot(&(&dr * &se)) - 0.5 * (&self.r_inv * &dr).trace()
                }
                _ => 0.0,
            }),
        )
    }

    fn dtheta_grad_x(&self, y: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let d = x.len();
        let m = self.h.nrows();
        let e = y - &self.h * x - &self.c;
        let se = &self.r_inv * &e;
        let mut out = DMatrix::zeros(d, self.free.len());
        for (k, p) in self.free.iter().enumerate() {
            let col = match *p {
                LgssmParam::C(i) => -self.h.tr_mul(&self.r_inv.column(i).into_owned()),
                LgssmParam::H(i, j) => {
                    let mut v = -self.h.tr_mul(&self.r_inv.column(i).into_owned()) * x[j];
                    v[j] += se[i];
                    v
                }
                LgssmParam::R(i, j) => -self.h.tr_mul(&(&self.r_inv * sym_unit(m, i, j) * &se)),
                _ => DVector::zeros(d),
            };
            out.set_column(k, &col);
        }
        out
    }
}
