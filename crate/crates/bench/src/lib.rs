//! Shared fixtures for the criterion benches.

use resx_core::grid::Grid;
use resx_core::oracle::{GaussianMixture, MixtureSpec};
use resx_core::rng;

/// The testbed mixture resolved at `resolution`.
pub fn mixture(resolution: usize) -> GaussianMixture {
    MixtureSpec::testbed().at_resolution(resolution).expect("testbed resolves")
}

pub fn noise(side: usize, seed: u64) -> Grid {
    Grid::standard_normal((1, side, side), &mut rng::stream(seed, "bench", 0))
}
