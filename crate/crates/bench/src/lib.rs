//! Shared fixtures for the benchmarks.

use cmfd_core::synth::{generate_samples, DatasetOptions, Domain, Sample};
use cmfd_core::{Checkpoint, Model, ModelConfig, Tensor};

/// Deterministic pseudo-random tensor in `[-1, 1)` (LCG, no extra deps).
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

/// Freshly initialized compact model at `size × size`.
pub fn small_model(size: usize) -> (Model, Checkpoint) {
    let config = ModelConfig::small(size);
    let model = Model::new(&config).expect("valid preset");
    let params = model.init_params();
    (
        model,
        Checkpoint {
            params,
            config,
            training_step: 0,
        },
    )
}

pub fn samples(n: usize, domain: Domain, size: usize) -> Vec<Sample> {
    generate_samples(&DatasetOptions::new(n, domain, 1, size)).expect("generation succeeds")
}
