//! CSV and JSON output. Numbers are written in C `%.12e` style.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{SweepResult, TrialStatistics};
use crate::mixture::MixtureRun;
use crate::ssm::SimulationTrace;
use crate::vwf::FilterRun;

/// `x` formatted like C's `%.12e`, e.g. `1.234000000000e+00`.
pub fn fmt_sci(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let s = format!("{x:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_sci).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

/// `k, x_1..x_d, y_1..y_m` for `k = 1..K`.
pub fn write_trace_csv(path: &Path, trace: &SimulationTrace) -> Result<()> {
    let d = trace.states.first().map_or(0, |x| x.len());
    let m = trace.observations.first().map_or(0, |y| y.len());
    let mut w = writer(path)?;
    let mut header = vec!["k".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=m).map(|i| format!("y_{i}")));
    w.write_record(&header)?;
    for (i, y) in trace.observations.iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(trace.states[i + 1].iter().map(|v| fmt_sci(*v)));
        row.extend(y.iter().map(|v| fmt_sci(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Observations from the `y_*` columns of a trace CSV.
pub fn read_observations(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols: Vec<usize> = r
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("y_"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::Config(format!("{} has no y_* columns", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let y = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("{}: bad value on data row {}", path.display(), line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(DVector::from_vec(y));
    }
    Ok(out)
}

fn belief_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=d).map(|i| format!("m_{i}")).collect();
    for i in 1..=d {
        h.extend((1..=d).map(|j| format!("P_{i}{j}")));
    }
    h
}

fn belief_fields(b: &crate::belief::GaussianBelief) -> impl Iterator<Item = String> + '_ {
    let d = b.dim();
    b.mean
        .iter()
        .map(|v| fmt_sci(*v))
        .chain((0..d).flat_map(move |i| (0..d).map(move |j| fmt_sci(b.cov[(i, j)]))))
}

/// `k, m_*, P_**, loglik_increment, iters`.
pub fn write_filter_run_csv(path: &Path, run: &FilterRun) -> Result<()> {
    let d = run.filtered.first().map_or(0, |b| b.dim());
    let mut w = writer(path)?;
    let mut header = vec!["k".to_string()];
    header.extend(belief_header(d));
    header.extend(["loglik_increment".into(), "iters".into()]);
    w.write_record(&header)?;
    for (i, b) in run.filtered.iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(belief_fields(b));
        row.push(fmt_sci(run.increments[i]));
        row.push(run.iters_per_step[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per step and component: `k, component, weight, m_*, P_**,
/// loglik_increment, iters`.
pub fn write_mixture_run_csv(path: &Path, run: &MixtureRun) -> Result<()> {
    let d = run.filtered.first().map_or(0, |b| b.dim());
    let mut w = writer(path)?;
    let mut header = vec!["k".to_string(), "component".into(), "weight".into()];
    header.extend(belief_header(d));
    header.extend(["loglik_increment".into(), "iters".into()]);
    w.write_record(&header)?;
    for (i, mix) in run.filtered.iter().enumerate() {
        for (c, b) in mix.components.iter().enumerate() {
            let mut row = vec![(i + 1).to_string(), (c + 1).to_string(), fmt_sci(mix.weight())];
            row.extend(belief_fields(b));
            row.push(fmt_sci(run.increments[i]));
            row.push(run.iters_per_step[i].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `<parameter>, loglik, normalized`; failed points leave `loglik` empty and
/// an absent normalization leaves `normalized` empty.
pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([sweep.parameter.as_str(), "loglik", "normalized"])?;
    for (i, g) in sweep.grid.iter().enumerate() {
        let n = sweep.normalized.as_ref().and_then(|n| n[i]);
        w.write_record([fmt_sci(*g), fmt_opt(sweep.loglik[i]), fmt_opt(n)])?;
    }
    w.flush()?;
    Ok(())
}

/// One MLE trial; `theta` is absent when the trial failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub theta: Option<Vec<f64>>,
    pub loglik: Option<f64>,
    pub converged: bool,
}

/// `trial, <parameters…>, loglik, converged`.
pub fn write_trials_csv(path: &Path, names: &[String], rows: &[TrialRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["trial".to_string()];
    header.extend(names.iter().cloned());
    header.extend(["loglik".into(), "converged".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.trial.to_string()];
        match &r.theta {
            Some(t) => row.extend(t.iter().map(|v| fmt_sci(*v))),
            None => row.extend(names.iter().map(|_| String::new())),
        }
        row.push(fmt_opt(r.loglik));
        row.push(r.converged.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub mean: f64,
    pub std: Option<f64>,
}

/// One row of a parameter-estimation table: mean and spread per parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSummary {
    pub filter: String,
    pub trials: usize,
    pub successes: usize,
    pub parameters: BTreeMap<String, ParameterSummary>,
}

impl EstimateSummary {
    pub fn new(filter: &str, trials: usize, names: &[String], stats: Option<&TrialStatistics>) -> Self {
        let parameters = match stats {
            Some(s) => names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    (
                        n.clone(),
                        ParameterSummary {
                            mean: s.mean[i],
                            std: s.std.as_ref().map(|v| v[i]),
                        },
                    )
                })
                .collect(),
            None => BTreeMap::new(),
        };
        Self {
            filter: filter.to_string(),
            trials,
            successes: stats.map_or(0, |s| s.n),
            parameters,
        }
    }
}
