use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use vgf_core::estimate::{
    linear_grid, pf_median_estimate, run_filter, sweep_parameter, trial_statistics, MleConfig,
};
use vgf_core::io::{
    fmt_sci, read_observations, write_filter_run_csv, write_json, write_mixture_run_csv, write_sweep_csv,
    write_trace_csv, write_trials_csv, EstimateSummary, TrialRow,
};
use vgf_core::mixture::{mixture_filter, CollapseEvent, MixtureBelief, MixtureConfig};
use vgf_core::{mle, FilterKind, FilterRun, GaussianBelief, LoglikSettings, ModelDefinition};

use crate::config::{FilterChoice, RunConfig};
use crate::CliError;

/// Observations with a name used in output file names.
struct Trace {
    name: String,
    observations: Vec<DVector<f64>>,
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn model(cfg: &RunConfig) -> Result<ModelDefinition, CliError> {
    Ok(cfg.family()?.build(&cfg.family_theta(&cfg.theta_vector()?))?)
}

fn simulated_name(cfg: &RunConfig, k: usize, seed: u64) -> String {
    format!("{}_K{k}_seed{seed}", cfg.model.name())
}

/// The configured trace files, or fresh simulations for every (K, seed).
fn load_traces(cfg: &RunConfig) -> Result<Vec<Trace>, CliError> {
    if !cfg.traces.is_empty() {
        let mut out = Vec::with_capacity(cfg.traces.len());
        for path in &cfg.traces {
            let observations = read_observations(path)?;
            if observations.is_empty() {
                return Err(CliError::Config(format!("{} has no observations", path.display())));
            }
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().trim_start_matches("trace_").to_string())
                .unwrap_or_else(|| "trace".into());
            out.push(Trace { name, observations });
        }
        let mut names: Vec<&str> = out.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("trace files must have distinct names".into()));
        }
        return Ok(out);
    }
    let m = model(cfg)?;
    let mut out = Vec::new();
    for &k in &cfg.steps {
        for &seed in &cfg.seeds {
            out.push(Trace {
                name: simulated_name(cfg, k, seed),
                observations: vgf_core::simulate(&m, k, seed)?.observations,
            });
        }
    }
    Ok(out)
}

fn settings(cfg: &RunConfig) -> LoglikSettings {
    LoglikSettings {
        rule: cfg.quadrature.rule(),
        flow: cfg.flow.flow(),
        particles: cfg.particles,
        seed: cfg.seeds[0],
    }
}

fn write_manifest(cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    Ok(write_json(path, cfg)?)
}

/// The manifest records every parameter explicitly.
fn explicit(cfg: &RunConfig) -> Result<RunConfig, CliError> {
    let mut c = cfg.clone();
    c.theta = cfg.theta_names().into_iter().zip(cfg.theta_vector()?).collect();
    Ok(c)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    prepare_out(&cfg.out)?;
    let m = model(cfg)?;
    for &k in &cfg.steps {
        for &seed in &cfg.seeds {
            let trace = vgf_core::simulate(&m, k, seed)?;
            let name = simulated_name(cfg, k, seed);
            write_trace_csv(&cfg.out.join(format!("trace_{name}.csv")), &trace)?;
            let mut manifest = explicit(cfg)?;
            manifest.steps = vec![k];
            manifest.seeds = vec![seed];
            manifest.traces = Vec::new();
            write_manifest(&manifest, &cfg.out.join(format!("trace_{name}.manifest.json")))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FilterSummary<'a> {
    filter: &'a str,
    model: &'a str,
    trace: &'a str,
    loglik: f64,
    converged_steps: usize,
    total_steps: usize,
}

fn write_collapse_csv(path: &Path, events: &[CollapseEvent]) -> Result<(), CliError> {
    let mut text = String::from("step,component_a,component_b,distance\n");
    for e in events {
        text.push_str(&format!(
            "{},{},{},{}\n",
            e.step,
            e.components.0 + 1,
            e.components.1 + 1,
            fmt_sci(e.distance)
        ));
    }
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Components at evenly spaced offsets in `[−δ, δ]` along the first axis
/// around the prior mean, each with covariance `δ² I`.
fn initial_mixture(cfg: &RunConfig, m: &ModelDefinition) -> Result<MixtureBelief, CliError> {
    let n = cfg.n_components;
    if n == 1 {
        return Ok(MixtureBelief::single(m.prior.clone()));
    }
    let prior_sd = m.prior.cov[(0, 0)].max(0.0).sqrt();
    let delta = cfg
        .mixture_offset
        .unwrap_or(if prior_sd > 0.0 { prior_sd } else { 1.0 });
    let d = m.dim();
    let comps = (0..n)
        .map(|i| {
            let t = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            let mut mean = m.prior.mean.clone();
            mean[0] += t * delta;
            GaussianBelief::new(mean, DMatrix::identity(d, d) * (delta * delta))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MixtureBelief::new(comps)?)
}

fn run_mixture(cfg: &RunConfig, trace: &Trace) -> Result<(), CliError> {
    let m = model(cfg)?;
    let init = initial_mixture(cfg, &m)?;
    let mix_cfg = MixtureConfig {
        flow: cfg.flow.flow(),
        ..MixtureConfig::default()
    };
    let run = mixture_filter(&m, &trace.observations, &init, &cfg.quadrature.rule(), &mix_cfg)?;
    let stem = format!("filter_vwf-mixture_{}", trace.name);
    write_mixture_run_csv(&cfg.out.join(format!("{stem}.csv")), &run)?;
    for c in 0..init.len() {
        let component = FilterRun {
            filtered: run.filtered.iter().map(|b| b.components[c].clone()).collect(),
            predicted: run.predicted.iter().map(|b| b.components[c].clone()).collect(),
            loglik: run.loglik,
            increments: run.increments.clone(),
            iters_per_step: run.iters_per_step.clone(),
            converged: run.converged.clone(),
        };
        write_filter_run_csv(&cfg.out.join(format!("{stem}_c{}.csv", c + 1)), &component)?;
    }
    write_collapse_csv(&cfg.out.join(format!("{stem}_collapse.csv")), &run.collapse_events)?;
    write_json(
        &cfg.out.join(format!("{stem}.json")),
        &FilterSummary {
            filter: "vwf-mixture",
            model: cfg.model.name(),
            trace: &trace.name,
            loglik: run.loglik,
            converged_steps: run.converged_steps(),
            total_steps: run.steps(),
        },
    )?;
    Ok(())
}

fn run_single(cfg: &RunConfig, trace: &Trace, kind: FilterKind) -> Result<(), CliError> {
    let family = cfg.family()?;
    let theta = cfg.family_theta(&cfg.theta_vector()?);
    let run = run_filter(family.as_ref(), &theta, &trace.observations, kind, &settings(cfg))?;
    let stem = format!("filter_{}_{}", kind.name(), trace.name);
    write_filter_run_csv(&cfg.out.join(format!("{stem}.csv")), &run)?;
    write_json(
        &cfg.out.join(format!("{stem}.json")),
        &FilterSummary {
            filter: kind.name(),
            model: cfg.model.name(),
            trace: &trace.name,
            loglik: run.loglik,
            converged_steps: run.converged.iter().filter(|c| **c).count(),
            total_steps: run.steps(),
        },
    )?;
    Ok(())
}

/// Runs every trace; one failure among several is a partial result.
fn for_each_trace<F>(traces: &[Trace], f: F) -> Result<(), CliError>
where
    F: Fn(&Trace) -> Result<(), CliError>,
{
    let mut failures = Vec::new();
    for t in traces {
        match f(t) {
            Ok(()) => {}
            Err(CliError::Config(m)) => return Err(CliError::Config(m)),
            Err(e) => failures.push(format!("{}: {e}", t.name)),
        }
    }
    match failures.len() {
        0 => Ok(()),
        n if n == traces.len() => Err(CliError::Numerical(failures.join("; "))),
        _ => Err(CliError::Partial(failures.join("; "))),
    }
}

pub fn filter(cfg: &RunConfig) -> Result<(), CliError> {
    let traces = load_traces(cfg)?;
    prepare_out(&cfg.out)?;
    write_manifest(&explicit(cfg)?, &cfg.out.join("manifest.json"))?;
    let choice = cfg.filter.unwrap_or(FilterChoice::Vwf);
    for_each_trace(&traces, |t| match choice.kind() {
        Some(kind) => run_single(cfg, t, kind),
        None => run_mixture(cfg, t),
    })
}

#[derive(Serialize)]
struct SweepEntry {
    file: String,
    filter: &'static str,
    trace: String,
    steps: usize,
    argmax: Option<f64>,
    failed_points: usize,
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let traces = load_traces(cfg)?;
    let s = &cfg.sweep;
    let grid = linear_grid(s.start, s.stop, s.step)?;
    let parameter = cfg.family_param(&s.parameter)?;
    let family = cfg.family()?;
    let theta = cfg.family_theta(&cfg.theta_vector()?);
    let kinds: Vec<FilterKind> = match cfg.filter {
        Some(choice) => vec![choice
            .kind()
            .ok_or_else(|| CliError::Config("sweeps do not support the mixture filter".into()))?],
        None => s.kinds.clone(),
    };
    prepare_out(&cfg.out)?;
    write_manifest(&explicit(cfg)?, &cfg.out.join("manifest.json"))?;
    let settings = settings(cfg);
    let mut entries = Vec::new();
    for t in &traces {
        for &kind in &kinds {
            let result = sweep_parameter(family.as_ref(), &theta, &parameter, &grid, &t.observations, kind, &settings)?;
            let file = format!("sweep_{}_{}.csv", kind.name(), t.name);
            write_sweep_csv(&cfg.out.join(&file), &result)?;
            entries.push(SweepEntry {
                file,
                filter: kind.name(),
                trace: t.name.clone(),
                steps: t.observations.len(),
                argmax: result.argmax(),
                failed_points: result.failures(),
            });
        }
    }
    write_json(&cfg.out.join("sweep_summary.json"), &entries)?;
    let failed: usize = entries.iter().map(|e| e.failed_points).sum();
    if failed == 0 {
        Ok(())
    } else if entries.iter().all(|e| e.failed_points == grid.len()) {
        Err(CliError::Numerical("every grid point failed".into()))
    } else {
        Err(CliError::Partial(format!("{failed} grid points failed")))
    }
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    let traces = load_traces(cfg)?;
    let choice = cfg.filter.unwrap_or(FilterChoice::Vwf);
    let kind = choice
        .kind()
        .ok_or_else(|| CliError::Config("estimation does not support the mixture filter".into()))?;
    let family = cfg.family()?;
    let init = cfg.family_theta(&cfg.init_vector()?);
    let names = cfg.family_names();
    let mle_cfg = MleConfig {
        settings: settings(cfg),
        optimizer: cfg.estimate.optimizer.clone(),
        ..MleConfig::default()
    };
    prepare_out(&cfg.out)?;
    write_manifest(&explicit(cfg)?, &cfg.out.join("manifest.json"))?;

    let rows: Vec<TrialRow> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let fit = if kind == FilterKind::Pf {
                pf_median_estimate(
                    family.as_ref(),
                    &init,
                    &t.observations,
                    &mle_cfg,
                    cfg.estimate.subtrials,
                    cfg.seeds[0],
                )
                .and_then(|est| {
                    let mut s = mle_cfg.settings.clone();
                    s.seed = cfg.seeds[0];
                    let ll = vgf_core::loglik(family.as_ref(), &est.theta_hat, &t.observations, kind, &s)?;
                    let converged = est.subtrials.iter().flatten().any(|r| r.converged);
                    Ok((est.theta_hat, ll, converged))
                })
            } else {
                mle(family.as_ref(), &init, &t.observations, kind, &mle_cfg).map(|r| (r.theta_hat, r.loglik, r.converged))
            };
            match fit {
                Ok((theta, ll, converged)) => TrialRow {
                    trial: i + 1,
                    theta: Some(theta),
                    loglik: Some(ll),
                    converged,
                },
                Err(e) => {
                    eprintln!("vgf: trial {} ({}): {e}", i + 1, t.name);
                    TrialRow {
                        trial: i + 1,
                        theta: None,
                        loglik: None,
                        converged: false,
                    }
                }
            }
        })
        .collect();

    write_trials_csv(&cfg.out.join(format!("trials_{}.csv", kind.name())), &names, &rows)?;
    let ok: Vec<Vec<f64>> = rows.iter().filter_map(|r| r.theta.clone()).collect();
    let stats = if ok.is_empty() { None } else { Some(trial_statistics(&ok)?) };
    let summary = EstimateSummary::new(kind.name(), rows.len(), &names, stats.as_ref());
    write_json(&cfg.out.join(format!("summary_{}.json", kind.name())), &summary)?;
    match ok.len() {
        n if n == rows.len() => Ok(()),
        0 => Err(CliError::Numerical("every trial failed".into())),
        n => Err(CliError::Partial(format!("{} of {} trials failed", rows.len() - n, rows.len()))),
    }
}

