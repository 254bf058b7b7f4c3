//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pyrdiff_core::bench::BenchConfig;
use pyrdiff_core::training::{PairSampler, TrainConfig};
use pyrdiff_core::{DenoiserConfig, NoiseSchedule, PyramidSchedule, SamplerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_ECHO: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Downsampling factors per equal share of the steps, noisiest last.
    pub pyramid: String,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            alpha_start: 0.999999,
            alpha_end: 0.99,
            pyramid: "[1,1,2,2]".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: DenoiserConfig::default().widths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Folder of `{id}_low.png` / `{id}_normal.png` pairs; synthetic scenes
    /// are used when absent.
    pub folder: Option<PathBuf>,
    pub sampler: PairSampler,
    /// Pairs written by `gen-data`.
    pub count: usize,
    /// Held-out synthetic pairs for quality scores.
    pub validation_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            folder: None,
            sampler: PairSampler::default(),
            count: 100,
            validation_count: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub gamma: f64,
    pub ddim_steps: Option<usize>,
    pub eta: f64,
    pub use_corrector: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            ddim_steps: None,
            eta: 0.0,
            use_corrector: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub schedules: Vec<String>,
    /// Diffusion length for timing; the trained length when absent.
    pub steps: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub passes: usize,
    pub ddpm: bool,
    pub ddim_steps: Option<usize>,
    pub workers: usize,
    /// Validation images scored per row; 0 skips quality columns.
    pub quality_images: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            schedules: vec!["[1,1,1,1]".into(), "[1,1,2,2]".into()],
            steps: None,
            height: b.height,
            width: b.width,
            warmup: b.warmup,
            passes: b.passes,
            ddpm: b.ddpm,
            ddim_steps: b.ddim_steps,
            workers: b.workers,
            quality_images: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampling: SamplingConfig,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            sampling: SamplingConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Stable hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serialises"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn noise_schedule(&self) -> pyrdiff_core::Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.alpha_start, s.alpha_end)
    }

    pub fn pyramid(&self) -> pyrdiff_core::Result<PyramidSchedule> {
        PyramidSchedule::from_bracket(self.schedule.steps, &self.schedule.pyramid)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            widths: self.model.widths,
            steps: self.schedule.steps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            gamma: self.sampling.gamma,
            ddim_steps: self.sampling.ddim_steps,
            ddim_eta: self.sampling.eta,
            seed: self.seed,
            dump_dir: None,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        let b = &self.bench;
        BenchConfig {
            height: b.height,
            width: b.width,
            warmup: b.warmup,
            passes: b.passes,
            ddpm: b.ddpm,
            ddim_steps: b.ddim_steps,
            seed: self.seed,
            gamma: self.sampling.gamma,
            workers: b.workers,
        }
    }

    /// Checks everything that can be checked without touching files.
    pub fn validate(&self) -> anyhow::Result<()> {
        let ns = self.noise_schedule()?;
        let ps = self.pyramid()?;
        self.train_config().validate(&ps)?;
        self.sampler_config().validate(&ns)?;
        for s in &self.bench.schedules {
            PyramidSchedule::from_bracket(self.bench.steps.unwrap_or(self.schedule.steps), s)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes the configuration next to a command's outputs.
    pub fn echo_into(&self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}
