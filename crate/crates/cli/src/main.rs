//! `vgf`: simulate state-space models, run filters, sweep likelihoods and
//! estimate parameters. Output is CSV and JSON for plotting.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FilterChoice, ModelKind, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unusable input files.
    Config(String),
    /// A filter or optimizer failed.
    Numerical(String),
    /// Some runs failed; the rest were written.
    Partial(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Partial(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Partial(m) => write!(f, "partial results: {m}"),
        }
    }
}

impl From<vgf_core::Error> for CliError {
    fn from(e: vgf_core::Error) -> Self {
        match e {
            vgf_core::Error::Io(_) | vgf_core::Error::Csv(_) | vgf_core::Error::Json(_) => {
                CliError::Config(e.to_string())
            }
            e if e.is_config() => CliError::Config(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vgf", version, about = "Wasserstein gradient-flow filtering for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one trace per (K, seed) and write trace CSVs with manifests.
    Simulate(Common),
    /// Run a filter over a trace.
    Filter(Common),
    /// Log-likelihood along a parameter grid, one CSV per filter kind and K.
    Sweep(Common),
    /// Maximum-likelihood estimates per trace with a summary table.
    Estimate(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model to use when no configuration file is given.
    #[arg(long, value_parser = ["sv", "bimodal", "lgssm"])]
    model: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of traces (seeds `seed, seed+1, …`).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    filter: Option<FilterChoice>,
    #[arg(long)]
    quad_order: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    /// Trace CSV to read; repeat for several.
    #[arg(long)]
    trace: Vec<PathBuf>,
    /// Number of steps K; repeat for several.
    #[arg(long)]
    steps: Vec<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match (&self.config, &self.model) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(m)) => RunConfig::new(match m.as_str() {
                "sv" => ModelKind::Sv,
                "bimodal" => ModelKind::Bimodal,
                _ => ModelKind::Lgssm,
            }),
            (None, None) => return Err(CliError::Config("give --config or --model".into())),
        };
        if let (Some(_), Some(m)) = (&self.config, &self.model) {
            if m != cfg.model.name() {
                return Err(CliError::Config(format!(
                    "--model {m} conflicts with model {} in the configuration",
                    cfg.model.name()
                )));
            }
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        match (self.seed, self.trials) {
            (Some(s), Some(n)) => cfg.seeds = (s..s + n as u64).collect(),
            (Some(s), None) => cfg.seeds = vec![s],
            (None, Some(n)) => {
                let s = cfg.seeds.first().copied().unwrap_or(1);
                cfg.seeds = (s..s + n as u64).collect();
            }
            (None, None) => {}
        }
        if let Some(f) = self.filter {
            cfg.filter = Some(f);
        }
        if let Some(q) = self.quad_order {
            cfg.quadrature.order = q;
        }
        if let Some(p) = self.particles {
            cfg.particles = p;
        }
        if let Some(c) = self.components {
            cfg.n_components = c;
        }
        if !self.trace.is_empty() {
            cfg.traces = self.trace.clone();
        }
        if !self.steps.is_empty() {
            cfg.steps = self.steps.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => c.resolve().and_then(|cfg| commands::simulate(&cfg)),
        Command::Filter(c) => c.resolve().and_then(|cfg| commands::filter(&cfg)),
        Command::Sweep(c) => c.resolve().and_then(|cfg| commands::sweep(&cfg)),
        Command::Estimate(c) => c.resolve().and_then(|cfg| commands::estimate(&cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vgf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
