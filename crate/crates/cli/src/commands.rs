//! Subcommand implementations, callable without going through argument
//! parsing.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use anyhow::{bail, Context};
use log::info;
use pyrdiff_core::bench::{run_benchmark, BenchReport};
use pyrdiff_core::checkpoint::{Checkpoint, MANIFEST_FILE};
use pyrdiff_core::imageops::{load_png, save_png};
use pyrdiff_core::training::{
    generate_pair, load_models, load_pair_folder, train as run_training, validation_set,
    PairSource, StepReport, TrainState, CHECKPOINT_DIR,
};
use pyrdiff_core::{
    Condition, Corrector, DenoiserInput, ImageTensor, NoisePredictor, NoiseSchedule,
    PyramidSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
struct PairEntry {
    id: String,
    low: String,
    normal: String,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct DataManifest {
    count: usize,
    height: usize,
    width: usize,
    pairs: Vec<PairEntry>,
}

/// Writes `count` synthetic pairs as `{id}_low.png` / `{id}_normal.png` plus
/// `manifest.json`.
pub fn gen_data(cfg: &RunConfig, out: &Path, count: usize) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo_into(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let seed: u64 = rng.random();
        let (low, normal) = generate_pair(&cfg.data.sampler, seed);
        let id = format!("{i:05}");
        let low_name = format!("{id}_low.png");
        let normal_name = format!("{id}_normal.png");
        save_png(&low, out.join(&low_name))?;
        save_png(&normal, out.join(&normal_name))?;
        pairs.push(PairEntry {
            id,
            low: low_name,
            normal: normal_name,
            seed,
        });
    }
    let manifest = DataManifest {
        count,
        height: cfg.data.sampler.height,
        width: cfg.data.sampler.width,
        pairs,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Fields that may differ between an interrupted run and its continuation.
fn resume_key(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.train.iterations = 0;
    c.train.checkpoint_every = 0;
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub resumed_from: usize,
    pub iterations: usize,
    pub seconds: f64,
}

/// Trains into `out`, continuing from `out/checkpoint` when it exists and was
/// written by the same configuration.
pub fn train(
    cfg: &RunConfig,
    out: &Path,
    mut on_step: impl FnMut(&StepReport),
) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let ns = cfg.noise_schedule()?;
    let ps = cfg.pyramid()?;
    let tc = cfg.train_config();
    let source = match &cfg.data.folder {
        Some(dir) => {
            let pairs = load_pair_folder(dir)?;
            if pairs.is_empty() {
                bail!("no *_low.png / *_normal.png pairs in {}", dir.display());
            }
            PairSource::Images(pairs)
        }
        None => PairSource::Synthetic(cfg.data.sampler.clone()),
    };
    let ck_dir = out.join(CHECKPOINT_DIR);
    let mut state = if ck_dir.join(MANIFEST_FILE).exists() {
        let ck = Checkpoint::load(&ck_dir)?;
        let stored: RunConfig = serde_json::from_value(
            ck.metadata
                .get("run")
                .cloned()
                .context("checkpoint lacks its run configuration")?,
        )
        .context("checkpoint run configuration is unreadable")?;
        if resume_key(&stored) != resume_key(cfg) {
            bail!(
                "{} was written with a different configuration; choose another --out",
                ck_dir.display()
            );
        }
        let state = TrainState::from_checkpoint(&ck, &tc.adam)?;
        info!("resuming from iteration {}", state.iteration);
        state
    } else {
        TrainState::new(cfg.denoiser_config(), &tc)?
    };
    cfg.echo_into(out)?;
    let resumed_from = state.iteration;
    let start = Instant::now();
    let metadata = serde_json::to_value(cfg)?;
    let checkpoint = run_training(&mut state, &ns, &ps, &tc, &source, out, &metadata, |r| {
        if (r.iteration + 1) % 100 == 0 {
            info!(
                "iteration {} denoiser {:.4} corrector {} lr {:.2e}",
                r.iteration + 1,
                r.denoiser_loss,
                r.corrector_loss
                    .map_or("-".to_string(), |v| format!("{v:.4}")),
                r.lr
            );
        }
        on_step(r);
    })?;
    Ok(TrainSummary {
        checkpoint,
        resumed_from,
        iterations: state.iteration,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Forwards to another predictor and counts calls.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor<f32>,
    calls: AtomicUsize,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor<f32>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl NoisePredictor<f32> for CountingPredictor<'_> {
    fn predict_noise(&self, input: &DenoiserInput<f32>) -> pyrdiff_core::Result<ImageTensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_noise(input)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub height: usize,
    pub width: usize,
    /// Working resolution after reflect padding, if any was needed.
    pub padded_to: Option<(usize, usize)>,
    pub denoiser_calls: usize,
    pub seconds: f64,
}

/// Loads a low-light PNG, samples an enhancement and writes it.
pub fn enhance(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    dump_dir: Option<&Path>,
) -> anyhow::Result<EnhanceReport> {
    cfg.validate()?;
    let ns = cfg.noise_schedule()?;
    let ps = cfg.pyramid()?;
    let (denoiser, corrector) = load_models(checkpoint)?;
    if denoiser.config().steps != ns.steps() {
        bail!(
            "checkpoint was trained with {} steps, configuration has {}",
            denoiser.config().steps,
            ns.steps()
        );
    }
    let low: ImageTensor = load_png(input)?;
    let (h, w) = (low.height(), low.width());
    let m = 4 * ps.max_factor();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded_to = (ph != h || pw != w).then_some((ph, pw));
    let work = if let Some((ph, pw)) = padded_to {
        info!("padding {h}x{w} to {ph}x{pw} by reflection; output is cropped back");
        low.pad_reflect(ph - h, pw - w)?
    } else {
        low
    };
    let cond = Condition::for_schedule(&work, &ps)?;
    let counter = CountingPredictor::new(&denoiser);
    let corrector = cfg
        .sampling
        .use_corrector
        .then_some(&corrector as &dyn Corrector<f32>);
    let sampler = pyrdiff_core::SamplerConfig {
        dump_dir: dump_dir.map(Path::to_path_buf),
        ..cfg.sampler_config()
    };
    let start = Instant::now();
    let out = pyrdiff_core::diffusion::sample(
        &ns,
        &ps,
        &sampler,
        &counter,
        corrector,
        &cond,
    )?;
    let seconds = start.elapsed().as_secs_f64();
    let out = out.crop(0, 0, h, w)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_png(&out, output)?;
    Ok(EnhanceReport {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        height: h,
        width: w,
        padded_to,
        denoiser_calls: counter.calls(),
        seconds,
    })
}

/// Times every configured schedule with the checkpoint's models and writes
/// `bench.csv`, `bench.dat` (gnuplot) and `bench.txt` into `out`.
pub fn bench(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> anyhow::Result<BenchReport> {
    cfg.validate()?;
    let (denoiser, corrector) = load_models(checkpoint)?;
    let steps = cfg.bench.steps.unwrap_or(cfg.schedule.steps);
    let ns = NoiseSchedule::linear(steps, cfg.schedule.alpha_start, cfg.schedule.alpha_end)?;
    let schedules = cfg
        .bench
        .schedules
        .iter()
        .map(|s| Ok((s.clone(), PyramidSchedule::from_bracket(steps, s)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let validation = validation_set(&cfg.data.sampler, cfg.bench.quality_images, cfg.seed);
    let corrector = cfg
        .sampling
        .use_corrector
        .then_some(&corrector as &dyn Corrector<f32>);
    let report = run_benchmark(
        &denoiser,
        corrector,
        &ns,
        &schedules,
        &validation,
        &cfg.bench_config(),
    )?;
    cfg.echo_into(out)?;
    report.write_csv(out.join("bench.csv"))?;
    let dat = out.join("bench.dat");
    fs::write(&dat, report.gnuplot_data()).with_context(|| format!("writing {}", dat.display()))?;
    let txt = out.join("bench.txt");
    fs::write(&txt, report.summary()).with_context(|| format!("writing {}", txt.display()))?;
    Ok(report)
}
