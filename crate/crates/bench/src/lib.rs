//! Shared fixtures for the estimation benchmarks.

use dewm_core::{
    benchmark_class, demean_outcomes, generate_dgp, DgpSpec, EstimationConfig, PanelDataset,
    PropensityModel, WelfareWeights,
};

/// A demeaned benchmark dataset of `n` trajectories.
pub fn fixture_dataset(n: usize, seed: u64) -> PanelDataset {
    let raw = generate_dgp(&DgpSpec::dgp3(), n, seed).expect("generation succeeds");
    demean_outcomes(&raw).expect("demeaning succeeds")
}

/// Fair-coin propensities for a two-stage dataset.
pub fn fixture_propensity() -> PropensityModel {
    PropensityModel::known_constant(2, 0.5).expect("valid propensity")
}

/// Benchmark estimation configuration over the standard linear classes.
pub fn fixture_config(seed: u64) -> EstimationConfig {
    let weights = WelfareWeights::new(vec![0.0, 1.0]).expect("valid weights");
    let mut cfg = EstimationConfig::new(weights, benchmark_class(&DgpSpec::dgp3()));
    cfg.seed = seed;
    cfg
}
