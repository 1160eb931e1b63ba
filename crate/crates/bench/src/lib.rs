//! Shared fixtures for the kernel benchmarks.

use nngp_core::input::InputSet;
use nngp_core::tensor::{CovFull, SpatialShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random input set with unit-scale pixels.
pub fn random_inputs(n: usize, channels: usize, d: usize, seed: u64) -> InputSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            (0..channels * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    InputSet::new(
        samples,
        (0..n as u64).collect(),
        channels,
        SpatialShape::OneD(d),
    )
    .unwrap()
}

/// Random PSD covariance tensor from a Gram construction.
pub fn random_psd(n: usize, d: usize, seed: u64) -> CovFull {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n * d;
    let rank = m + 4;
    let g: Vec<f64> = (0..m * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut flat = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            flat[i * m + j] = (0..rank).map(|k| g[i * rank + k] * g[j * rank + k]).sum();
        }
    }
    CovFull::from_flat(&flat, n, SpatialShape::OneD(d), 0).unwrap()
}
