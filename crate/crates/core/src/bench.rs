//! Cost model, timing harness and quality evaluation across downsampling
//! schedules.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::Corrector;
use crate::denoiser::{ConvDenoiser, NoisePredictor};
use crate::diffusion::{ddim_timesteps, sample, Condition};
use crate::error::{Error, Result};
use crate::imageops::{psnr, ssim, ImageTensor};
use crate::real::Real;
use crate::schedule::{NoiseSchedule, PyramidSchedule, SamplerConfig};

/// Denoiser steps taken by a pass: all of `T..1`, or the DDIM plan.
pub fn sampler_steps(ps: &PyramidSchedule, ddim_steps: Option<usize>) -> Result<Vec<usize>> {
    match ddim_steps {
        None => Ok((1..=ps.steps()).rev().collect()),
        Some(n) => ddim_timesteps(ps, n),
    }
}

/// Convolution FLOPs (2 per multiply-accumulate) of the denoiser calls at
/// `steps`, each evaluated at its level's resolution.
pub fn estimate_flops_for_steps<R: Real>(
    model: &ConvDenoiser<R>,
    ps: &PyramidSchedule,
    base: (usize, usize),
    steps: &[usize],
) -> u64 {
    steps
        .iter()
        .map(|&t| {
            let (h, w) = ps.level_resolution(base.0, base.1, t);
            2 * model.conv_macs(h, w)
        })
        .sum()
}

/// Convolution FLOPs of one full ancestral pass.
pub fn estimate_flops<R: Real>(
    model: &ConvDenoiser<R>,
    ps: &PyramidSchedule,
    base: (usize, usize),
) -> u64 {
    let steps: Vec<usize> = (1..=ps.steps()).collect();
    estimate_flops_for_steps(model, ps, base, &steps)
}

/// Mean quality of sampled enhancements against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the raw low-light input against ground truth.
    pub input_psnr: f64,
}

/// Enhances every `(x_low, y)` pair (seed `cfg.seed + index`) and averages
/// PSNR and SSIM. Images are processed in parallel, results in input order.
pub fn evaluate(
    denoiser: &dyn NoisePredictor<f32>,
    corrector: Option<&dyn Corrector<f32>>,
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    cfg: &SamplerConfig,
    pairs: &[(ImageTensor, ImageTensor)],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let scores: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (low, y))| {
            let cond = Condition::for_schedule(low, ps)?;
            let run = SamplerConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                dump_dir: None,
                ..cfg.clone()
            };
            let out = sample(ns, ps, &run, denoiser, corrector, &cond)?;
            Ok((psnr(&out, y)?, ssim(&out, y)?, psnr(low, y)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        images: scores.len(),
        psnr: mean(|s| s.0),
        ssim: mean(|s| s.1),
        input_psnr: mean(|s| s.2),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub passes: usize,
    /// Also time DDPM passes over all steps.
    pub ddpm: bool,
    /// DDIM row, if any.
    pub ddim_steps: Option<usize>,
    pub seed: u64,
    pub gamma: f64,
    /// Workers for an additional concurrent-throughput row; 1 disables it.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            warmup: 3,
            passes: 20,
            ddpm: true,
            ddim_steps: Some(4),
            seed: 0,
            gamma: 1.0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub schedule: String,
    pub sampler: String,
    pub mode: String,
    pub denoiser_calls: usize,
    pub seconds_per_pass: f64,
    pub images_per_second: f64,
    pub flops: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, schedule: &str, sampler: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.schedule == schedule && r.sampler == sampler && r.mode == "single")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Whitespace-separated columns with a `#` header, one row per line.
    pub fn gnuplot_data(&self) -> String {
        let mut s = String::from(
            "# index schedule sampler mode calls seconds_per_pass images_per_second gflops psnr ssim\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i} \"{}\" {} {} {} {:.6} {:.4} {:.4} {} {}",
                r.schedule,
                r.sampler,
                r.mode,
                r.denoiser_calls,
                r.seconds_per_pass,
                r.images_per_second,
                r.flops as f64 / 1e9,
                r.psnr.map_or("nan".into(), |v| format!("{v:.3}")),
                r.ssim.map_or("nan".into(), |v| format!("{v:.4}")),
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("resolution {}x{}\n", self.height, self.width);
        let _ = writeln!(
            s,
            "{:<22} {:<8} {:<11} {:>6} {:>10} {:>9} {:>10} {:>7} {:>7}",
            "schedule", "sampler", "mode", "calls", "s/pass", "img/s", "GFLOP", "PSNR", "SSIM"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:<8} {:<11} {:>6} {:>10.4} {:>9.3} {:>10.2} {:>7} {:>7}",
                r.schedule,
                r.sampler,
                r.mode,
                r.denoiser_calls,
                r.seconds_per_pass,
                r.images_per_second,
                r.flops as f64 / 1e9,
                r.psnr.map_or("-".into(), |v| format!("{v:.2}")),
                r.ssim.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        s
    }
}

/// Times full reverse passes for every schedule and sampler, and scores
/// quality on `validation` when it is non-empty.
pub fn run_benchmark(
    denoiser: &ConvDenoiser,
    corrector: Option<&dyn Corrector<f32>>,
    ns: &NoiseSchedule,
    schedules: &[(String, PyramidSchedule)],
    validation: &[(ImageTensor, ImageTensor)],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.passes == 0 {
        return Err(Error::InvalidArgument("at least one timed pass is needed".into()));
    }
    let mut samplers: Vec<(String, Option<usize>)> = Vec::new();
    if cfg.ddpm {
        samplers.push(("ddpm".into(), None));
    }
    if let Some(n) = cfg.ddim_steps {
        samplers.push((format!("ddim{n}"), Some(n)));
    }
    let mut report = BenchReport {
        height: cfg.height,
        width: cfg.width,
        rows: Vec::new(),
    };
    for (tag, ps) in schedules {
        ps.check_resolution(cfg.height, cfg.width)?;
        // fixed input per schedule so that every pass does identical work
        let (low, _) = crate::training::generate_pair(
            &crate::training::PairSampler {
                height: cfg.height,
                width: cfg.width,
                ..Default::default()
            },
            cfg.seed,
        );
        let cond = Condition::for_schedule(&low, ps)?;
        for (name, ddim) in &samplers {
            let sampler_cfg = SamplerConfig {
                gamma: cfg.gamma,
                ddim_steps: *ddim,
                seed: cfg.seed,
                ..SamplerConfig::default()
            };
            let steps = sampler_steps(ps, *ddim)?;
            let flops = estimate_flops_for_steps(denoiser, ps, (cfg.height, cfg.width), &steps);
            let pass = |seed: u64| -> Result<ImageTensor> {
                let run = SamplerConfig {
                    seed,
                    ..sampler_cfg.clone()
                };
                sample(ns, ps, &run, denoiser, corrector, &cond)
            };
            for i in 0..cfg.warmup {
                pass(cfg.seed.wrapping_add(i as u64))?;
            }
            let start = Instant::now();
            for i in 0..cfg.passes {
                pass(cfg.seed.wrapping_add(i as u64))?;
            }
            let per_pass = start.elapsed().as_secs_f64() / cfg.passes as f64;
            let quality = if validation.is_empty() {
                None
            } else {
                Some(evaluate(denoiser, corrector, ns, ps, &sampler_cfg, validation)?)
            };
            report.rows.push(BenchRow {
                schedule: tag.clone(),
                sampler: name.clone(),
                mode: "single".into(),
                denoiser_calls: steps.len(),
                seconds_per_pass: per_pass,
                images_per_second: 1.0 / per_pass,
                flops,
                psnr: quality.as_ref().map(|q| q.psnr),
                ssim: quality.as_ref().map(|q| q.ssim),
            });
            if cfg.workers > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let start = Instant::now();
                pool.install(|| {
                    (0..cfg.passes)
                        .into_par_iter()
                        .map(|i| pass(cfg.seed.wrapping_add(i as u64)).map(|_| ()))
                        .collect::<Result<Vec<()>>>()
                })?;
                let elapsed = start.elapsed().as_secs_f64();
                report.rows.push(BenchRow {
                    schedule: tag.clone(),
                    sampler: name.clone(),
                    mode: format!("parallel-{}", cfg.workers),
                    denoiser_calls: steps.len(),
                    seconds_per_pass: elapsed / cfg.passes as f64,
                    images_per_second: cfg.passes as f64 / elapsed,
                    flops,
                    psnr: None,
                    ssim: None,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn cost_model_ratios() {
        let net = ConvDenoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let base = (64, 96);
        let c = estimate_flops(&net, &PyramidSchedule::constant(2000), base) as f64;
        let p = estimate_flops(&net, &PyramidSchedule::from_bracket(2000, "[1,1,2,2]").unwrap(), base) as f64;
        assert_eq!(p / c, 0.625);
        let q = estimate_flops(&net, &PyramidSchedule::from_bracket(2000, "[1,2,4,8]").unwrap(), base) as f64;
        let want = 0.25 * (1.0 + 0.25 + 1.0 / 16.0 + 1.0 / 64.0);
        assert!((q / c - want).abs() < 1e-12, "{}", q / c);
    }
}
