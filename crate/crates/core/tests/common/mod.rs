#![allow(dead_code)]

use rgito::qmle::EstimationInput;
use rgito::realized::{estimate_jump_params, measure_panel, MeasureConfig};
use rgito::simulator::{replication_seed, simulate, SimConfig, SimOutput};

/// Reference-design panel with the given Euler substeps.
pub fn design(n: usize, m: usize, substeps: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::reference(n, m, seed);
    cfg.euler_substeps_per_tick = substeps;
    cfg
}

/// Simulates, measures and assembles the estimation input with latent NV.
pub fn panel(cfg: &SimConfig) -> (EstimationInput<f64>, SimOutput) {
    let out = simulate(cfg).unwrap();
    let measured = measure_panel(&out.ticks, &MeasureConfig::default()).unwrap();
    let detections: Vec<_> = measured.iter().map(|(_, d)| d.clone()).collect();
    let input = EstimationInput::new(
        measured.iter().map(|(m, _)| m.rv).collect(),
        measured.iter().map(|(m, _)| m.jv).collect(),
        Some(out.nv.iter().map(|v| Some(*v)).collect()),
        estimate_jump_params(&detections),
    )
    .unwrap();
    (input, out)
}

pub fn coarse_panel(n: usize, m: usize, base: u64, rep: u64) -> (EstimationInput<f64>, SimOutput) {
    panel(&design(n, m, 1, replication_seed(base, rep)))
}
