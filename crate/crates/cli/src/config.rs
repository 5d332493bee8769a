use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vgf_core::estimate::BfgsConfig;
use vgf_core::ssm::LgssmParam;
use vgf_core::vwf::{CovarianceForm, LikelihoodRule, StepControl};
use vgf_core::{
    BimodalFamily, FilterKind, FlowConfig, LgssmFamily, LgssmSpec, ModelFamily, QuadratureKind,
    QuadratureRule, SVParameters, SvFamily,
};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Sv,
    Bimodal,
    Lgssm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sv => "sv",
            ModelKind::Bimodal => "bimodal",
            ModelKind::Lgssm => "lgssm",
        }
    }

    /// Parameter names and defaults, in the order the family expects.
    fn defaults(self) -> Vec<(&'static str, f64)> {
        match self {
            ModelKind::Sv => {
                let p = SVParameters::reference();
                vec![("mu", p.mu), ("alpha", p.alpha), ("sigma", p.sigma), ("rho", p.rho)]
            }
            ModelKind::Bimodal => vec![("delta_sq", 1.0)],
            ModelKind::Lgssm => vec![
                ("a", 0.9),
                ("b", 0.0),
                ("q", 0.5),
                ("h", 1.0),
                ("c", 0.0),
                ("r", 1.0),
                ("m0", 0.0),
                ("p0", 1.0),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum FilterChoice {
    #[serde(rename = "vwf")]
    #[value(name = "vwf")]
    Vwf,
    #[serde(rename = "vwf-mixture")]
    #[value(name = "vwf-mixture")]
    VwfMixture,
    #[serde(rename = "ekf")]
    #[value(name = "ekf")]
    Ekf,
    #[serde(rename = "pf")]
    #[value(name = "pf")]
    Pf,
    #[serde(rename = "kalman")]
    #[value(name = "kalman")]
    Kalman,
}

impl FilterChoice {
    /// The single-belief filter kind; `None` for the mixture filter.
    pub fn kind(self) -> Option<FilterKind> {
        match self {
            FilterChoice::Vwf => Some(FilterKind::Vwf),
            FilterChoice::VwfMixture => None,
            FilterChoice::Ekf => Some(FilterKind::Ekf),
            FilterChoice::Pf => Some(FilterKind::Pf),
            FilterChoice::Kalman => Some(FilterKind::Kalman),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSettings {
    pub kind: QuadratureKind,
    pub order: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        Self {
            kind: QuadratureKind::GaussHermite,
            order: 5,
            samples: 1000,
            seed: 0,
        }
    }
}

impl QuadratureSettings {
    pub fn rule(&self) -> QuadratureRule {
        match self.kind {
            QuadratureKind::GaussHermite => QuadratureRule::gauss_hermite(self.order),
            QuadratureKind::MonteCarlo => QuadratureRule::monte_carlo(self.samples, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceFormSetting {
    Stein,
    Hessian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodSetting {
    PosteriorImportance,
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub step_size: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub jitter: f64,
    pub covariance_form: CovarianceFormSetting,
    pub likelihood: LikelihoodSetting,
    /// Cap `h` at `safety / λ_max(E[∇²V])`; `null` keeps `h` fixed.
    pub step_safety: Option<f64>,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            tol: 1e-8,
            max_iters: 500,
            jitter: 1e-9,
            covariance_form: CovarianceFormSetting::Stein,
            likelihood: LikelihoodSetting::PosteriorImportance,
            step_safety: Some(0.5),
        }
    }
}

impl FlowSettings {
    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            step_size: self.step_size,
            tol: self.tol,
            max_iters: self.max_iters,
            jitter: self.jitter,
            covariance_form: match self.covariance_form {
                CovarianceFormSetting::Stein => CovarianceForm::Stein,
                CovarianceFormSetting::Hessian => CovarianceForm::Hessian,
            },
            likelihood: match self.likelihood {
                LikelihoodSetting::PosteriorImportance => LikelihoodRule::PosteriorImportance,
                LikelihoodSetting::Predictive => LikelihoodRule::Predictive,
            },
            step_control: match self.step_safety {
                Some(safety) => StepControl::CurvatureCapped { safety },
                None => StepControl::Fixed,
            },
            ..FlowConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub parameter: String,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub kinds: Vec<FilterKind>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            parameter: "rho".into(),
            start: -0.89,
            stop: -0.51,
            step: 0.01,
            kinds: vec![FilterKind::Vwf, FilterKind::Ekf, FilterKind::Pf],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSettings {
    /// Starting point; missing entries start at `theta`.
    pub theta_init: BTreeMap<String, f64>,
    /// Particle-filter runs per trace, aggregated by the median.
    pub subtrials: usize,
    pub optimizer: BfgsConfig,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            theta_init: BTreeMap::new(),
            subtrials: 25,
            optimizer: BfgsConfig::default(),
        }
    }
}

fn default_steps() -> Vec<usize> {
    vec![1000]
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_components() -> usize {
    2
}

fn default_particles() -> usize {
    500
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a command needs. Written back out as the run manifest, which
/// is itself a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub theta: BTreeMap<String, f64>,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    #[serde(default)]
    pub quadrature: QuadratureSettings,
    #[serde(default)]
    pub flow: FlowSettings,
    #[serde(default)]
    pub filter: Option<FilterChoice>,
    #[serde(default = "default_components")]
    pub n_components: usize,
    /// Offset `δ` of the initial mixture components; defaults to the prior
    /// standard deviation along the first axis.
    #[serde(default)]
    pub mixture_offset: Option<f64>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Trace CSVs to read instead of simulating.
    #[serde(default)]
    pub traces: Vec<PathBuf>,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub estimate: EstimateSettings,
}

impl RunConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            theta: BTreeMap::new(),
            steps: default_steps(),
            quadrature: QuadratureSettings::default(),
            flow: FlowSettings::default(),
            filter: None,
            n_components: default_components(),
            mixture_offset: None,
            particles: default_particles(),
            seeds: default_seeds(),
            out: default_out(),
            traces: Vec::new(),
            sweep: SweepSettings::default(),
            estimate: EstimateSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.theta_vector()?;
        self.init_vector()?;
        if self.steps.is_empty() || self.steps.contains(&0) {
            return bad("steps must be a non-empty list of positive integers".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.quadrature.kind == QuadratureKind::GaussHermite && self.quadrature.order == 0 {
            return bad("quadrature order must be >= 1".into());
        }
        if self.quadrature.kind == QuadratureKind::MonteCarlo && self.quadrature.samples == 0 {
            return bad("quadrature samples must be >= 1".into());
        }
        self.flow.flow().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.n_components == 0 {
            return bad("n_components must be >= 1".into());
        }
        if let Some(d) = self.mixture_offset {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("mixture_offset must be > 0, got {d}"));
            }
        }
        if self.particles < 2 {
            return bad(format!("particles must be >= 2, got {}", self.particles));
        }
        let s = &self.sweep;
        if !(s.step > 0.0) || !(s.stop >= s.start) || !s.start.is_finite() || !s.stop.is_finite() {
            return bad(format!("bad sweep grid {}..{} step {}", s.start, s.stop, s.step));
        }
        if s.kinds.is_empty() {
            return bad("sweep kinds must not be empty".into());
        }
        if self.estimate.subtrials == 0 {
            return bad("estimate subtrials must be >= 1".into());
        }
        self.estimate
            .optimizer
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    fn vector_from(&self, overrides: &BTreeMap<String, f64>, base: &[f64]) -> Result<Vec<f64>, CliError> {
        let defaults = self.model.defaults();
        if let Some(k) = overrides.keys().find(|k| !defaults.iter().any(|(n, _)| n == k)) {
            let names: Vec<&str> = defaults.iter().map(|(n, _)| *n).collect();
            return Err(CliError::Config(format!(
                "unknown {} parameter {k}; expected one of {}",
                self.model.name(),
                names.join(", ")
            )));
        }
        Ok(defaults
            .iter()
            .zip(base)
            .map(|((n, _), b)| overrides.get(*n).copied().unwrap_or(*b))
            .collect())
    }

    /// All model parameters, defaults filled in.
    pub fn theta_vector(&self) -> Result<Vec<f64>, CliError> {
        let base: Vec<f64> = self.model.defaults().iter().map(|(_, v)| *v).collect();
        self.vector_from(&self.theta, &base)
    }

    pub fn theta_names(&self) -> Vec<String> {
        self.model.defaults().iter().map(|(n, _)| n.to_string()).collect()
    }

    /// The estimation start: `estimate.theta_init` over `theta`.
    pub fn init_vector(&self) -> Result<Vec<f64>, CliError> {
        let theta = self.theta_vector()?;
        self.vector_from(&self.estimate.theta_init, &theta)
    }

    pub fn family(&self) -> Result<Box<dyn ModelFamily>, CliError> {
        let theta = self.theta_vector()?;
        Ok(match self.model {
            ModelKind::Sv => Box::new(SvFamily),
            ModelKind::Bimodal => Box::new(BimodalFamily),
            ModelKind::Lgssm => {
                let [a, b, q, h, c, r, m0, p0] = theta[..] else {
                    unreachable!("eight lgssm parameters")
                };
                Box::new(LgssmFamily::new(
                    LgssmSpec::scalar(a, b, q, h, c, r, m0, p0),
                    vec![
                        LgssmParam::A(0, 0),
                        LgssmParam::B(0),
                        LgssmParam::Q(0, 0),
                        LgssmParam::H(0, 0),
                        LgssmParam::C(0),
                        LgssmParam::R(0, 0),
                    ],
                ))
            }
        })
    }

    /// Parameter vector in the family's own layout (the linear model leaves
    /// the prior out; it is fixed by `m0`, `p0`).
    pub fn family_theta(&self, theta: &[f64]) -> Vec<f64> {
        match self.model {
            ModelKind::Lgssm => theta[..6].to_vec(),
            _ => theta.to_vec(),
        }
    }

    pub fn family_names(&self) -> Vec<String> {
        let names = self.theta_names();
        match self.model {
            ModelKind::Lgssm => names[..6].to_vec(),
            _ => names,
        }
    }

    /// The family's name for a configuration parameter name.
    pub fn family_param(&self, name: &str) -> Result<String, CliError> {
        let names = self.family_names();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Config(format!("cannot vary {name}; choose one of {}", names.join(", "))))?;
        let family = self.family()?;
        Ok(family.param_names()[idx].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"model": "sv", "stepz": [10]}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"model": "sv", "flow": {"h": 0.1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let c: RunConfig = serde_json::from_str(r#"{"model": "sv", "theta": {"rho": -0.5}}"#).unwrap();
        c.validate().unwrap();
        let t = c.theta_vector().unwrap();
        assert_eq!(t[3], -0.5);
        assert_eq!(t[1], 0.975);
        assert_eq!(c.steps, vec![1000]);
    }

    #[test]
    fn unknown_parameter_is_a_config_error() {
        let c: RunConfig = serde_json::from_str(r#"{"model": "bimodal", "theta": {"rho": 0.1}}"#).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::new(ModelKind::Lgssm);
        c.filter = Some(FilterChoice::VwfMixture);
        c.theta.insert("q".into(), 0.3);
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lgssm_names_map_to_family_names() {
        let c = RunConfig::new(ModelKind::Lgssm);
        assert_eq!(c.family_param("a").unwrap(), "a11");
        assert!(c.family_param("m0").is_err());
    }
}
