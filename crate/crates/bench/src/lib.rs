//! Inputs shared by the benchmarks.

use retest_core::simulate::{gen_continuous_grid, gen_study_fixture, standard_manifest, VarianceSpec};
use retest_core::{Dataset, NumericGrid, ReplicateMatrix, ThresholdConfig};

/// A segments x runs grid with the given population ICC.
pub fn grid(segments: usize, runs: usize, rho: f64, seed: u64) -> NumericGrid {
    gen_continuous_grid(&VarianceSpec::with_icc(rho, segments, runs, seed)).expect("valid spec")
}

pub fn matrix(model: &str, segments: usize, runs: usize, seed: u64) -> ReplicateMatrix {
    ReplicateMatrix::from_numeric(model, "bench", &grid(segments, runs, 0.8, seed))
}

/// The 3-model, 50-metric fixture used by the end-to-end suite.
pub fn standard_dataset(seed: u64) -> Dataset {
    gen_study_fixture(&standard_manifest(seed), &ThresholdConfig::default())
        .and_then(|f| f.dataset())
        .expect("standard fixture")
}
