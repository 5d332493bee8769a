//! Fixed workloads shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use vgf_core::{
    make_bimodal_model, make_sv_model, simulate, LgssmSpec, MixtureBelief, ModelDefinition,
    SVParameters, SimulationTrace,
};

pub struct Workload {
    pub model: ModelDefinition,
    pub trace: SimulationTrace,
}

fn workload(model: ModelDefinition, steps: usize, seed: u64) -> Workload {
    let trace = simulate(&model, steps, seed).expect("simulation of a valid model");
    Workload { model, trace }
}

/// Stochastic volatility with leverage at the reference parameters.
pub fn sv(steps: usize) -> Workload {
    workload(make_sv_model(SVParameters::reference()).unwrap(), steps, 1)
}

pub fn bimodal(steps: usize) -> Workload {
    workload(make_bimodal_model(1.0).unwrap(), steps, 1)
}

pub fn lgssm(steps: usize) -> Workload {
    let spec = LgssmSpec::scalar(0.9, 0.0, 0.5, 1.0, 0.0, 1.0, 0.0, 1.0);
    workload(spec.build().unwrap(), steps, 1)
}

/// Two components at `±1` with unit variance.
pub fn mirrored_init() -> MixtureBelief {
    MixtureBelief::mirrored(DVector::from_element(1, 1.0), DMatrix::identity(1, 1))
}
