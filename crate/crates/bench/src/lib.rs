//! Shared fixtures for the criterion benchmarks.

use pyrdiff_core::diffusion::Condition;
use pyrdiff_core::training::{generate_pair, PairSampler};
use pyrdiff_core::{
    ConvDenoiser, DenoiserConfig, GlobalCorrector, ImageTensor, NoiseSchedule, PyramidSchedule,
};

/// Untrained models for a schedule of `steps` steps.
pub fn models(steps: usize) -> (ConvDenoiser, GlobalCorrector) {
    let cfg = DenoiserConfig {
        steps,
        ..DenoiserConfig::default()
    };
    (ConvDenoiser::new(cfg, 0).unwrap(), GlobalCorrector::new(1))
}

pub fn schedules(steps: usize, pyramid: &str) -> (NoiseSchedule, PyramidSchedule) {
    (
        NoiseSchedule::linear(steps, 0.999999, 0.99).unwrap(),
        PyramidSchedule::from_bracket(steps, pyramid).unwrap(),
    )
}

/// A synthetic low-light image of the given size and its condition planes.
pub fn condition(height: usize, width: usize, ps: &PyramidSchedule) -> Condition {
    let sampler = PairSampler {
        height,
        width,
        ..PairSampler::default()
    };
    let (x_low, _) = generate_pair(&sampler, 7);
    Condition::for_schedule(&x_low, ps).unwrap()
}

pub fn noisy(height: usize, width: usize) -> ImageTensor {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    ImageTensor::randn(3, height, width, &mut rng)
}
