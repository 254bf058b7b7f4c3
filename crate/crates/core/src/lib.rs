//! Pyramid diffusion for low-light image enhancement.
//!
//! The reverse process runs its noisiest steps at reduced resolution and
//! refines at full resolution, and a lightweight global corrector removes
//! channel-wise colour shifts from the clean-image estimate whenever the
//! noise-to-signal amplification exceeds a threshold.

pub mod bench;
pub mod checkpoint;
pub mod corrector;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imageops;
pub mod nn;
pub mod real;
pub mod schedule;
pub mod training;

pub use corrector::{Corrector, GlobalCorrector};
pub use denoiser::{ConvDenoiser, DenoiserConfig, DenoiserInput, GaussianOracleDenoiser, NoisePredictor};
pub use diffusion::{Condition, ConditionLevel, DiffusionState};
pub use error::{Error, Result};
pub use imageops::ImageTensor;
pub use real::Real;
pub use schedule::{needs_correction, Level, NoiseSchedule, PyramidSchedule, SamplerConfig};
