//! Joint training of the noise predictor and the global corrector on paired
//! low/normal-light images.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corrector::GlobalCorrector;
use crate::denoiser::{l1_loss, ConvDenoiser, DenoiserConfig, DenoiserInput};
use crate::diffusion::{forward_marginal, reconstruct_x0, Condition, ConditionLevel};
use crate::error::{Error, Result};
use crate::imageops::{downsample, load_png, ImageTensor};
use crate::nn::{Adam, AdamConfig, Gradients};
use crate::schedule::{gate, NoiseSchedule, PyramidSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub iterations: usize,
    /// Iterations at which the learning rate halves.
    pub milestones: Vec<usize>,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Set by the caller; not part of the serialised form.
    #[serde(skip)]
    pub seed: u64,
    /// Amplification threshold above which the corrector is trained.
    pub gamma: f64,
    pub train_corrector: bool,
    /// Probability of feeding the equalised image before the low-light one.
    pub swap_probability: f64,
    /// Half-width of the uniform per-channel offset added to the corrector's
    /// input while training it.
    pub corrector_shift: f64,
    /// The corrector's learning rate relative to the denoiser's.
    pub corrector_lr_scale: f64,
    /// Checkpoint interval in iterations; the final state is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            adam: AdamConfig::default(),
            iterations: 5000,
            milestones: vec![781, 1172, 1562, 2344, 3125],
            patch_height: 32,
            patch_width: 48,
            seed: 0,
            gamma: 1.0,
            train_corrector: true,
            swap_probability: 0.5,
            corrector_shift: 0.3,
            corrector_lr_scale: 10.0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, ps: &PyramidSchedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !self.milestones.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument("milestones must be sorted".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return Err(Error::InvalidArgument(
                "swap_probability must lie in [0, 1]".into(),
            ));
        }
        if !(self.corrector_lr_scale > 0.0 && self.corrector_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument(
                "corrector_lr_scale must be positive".into(),
            ));
        }
        if !(self.corrector_shift >= 0.0 && self.corrector_shift.is_finite()) {
            return Err(Error::InvalidArgument(
                "corrector_shift must be non-negative".into(),
            ));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument("gamma must be non-negative".into()));
        }
        let m = 4 * ps.max_factor();
        if self.patch_height % m != 0 || self.patch_width % m != 0 {
            return Err(Error::NotDivisible {
                height: self.patch_height,
                width: self.patch_width,
                factor: m,
            });
        }
        Ok(())
    }
}

/// Learning rate after halving once per milestone already reached.
pub fn lr_schedule(cfg: &TrainConfig, iteration: usize) -> f64 {
    let halvings = cfg.milestones.iter().filter(|&&m| iteration >= m).count();
    cfg.learning_rate * 0.5f64.powi(halvings as i32)
}

/// Procedural scenes: a smooth two-colour gradient with random rectangles and
/// ellipses, darkened by a random illumination factor and corrupted by
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSampler {
    pub height: usize,
    pub width: usize,
    pub illumination: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub shapes: (usize, usize),
}

impl Default for PairSampler {
    fn default() -> Self {
        Self {
            height: 32,
            width: 48,
            illumination: (0.05, 0.3),
            noise_sigma: (0.02, 0.08),
            shapes: (2, 6),
        }
    }
}

fn draw_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Clean scene in `[0, 1]`.
fn scene(rng: &mut impl Rng, h: usize, w: usize, shapes: (usize, usize)) -> ImageTensor {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let angle = rng.random_range(0.0..TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = ImageTensor::from_fn(3, h, w, |c, y, x| {
        let u = (x as f64 + 0.5) / w as f64 - 0.5;
        let v = (y as f64 + 0.5) / h as f64 - 0.5;
        let s = ((u * ca + v * sa) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        (c0[c] + (c1[c] - c0[c]) * s) as f32
    });
    let count = if shapes.1 > shapes.0 {
        rng.random_range(shapes.0..=shapes.1)
    } else {
        shapes.0
    };
    for _ in 0..count {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.1..0.35) * h as f64;
        let rx = rng.random_range(0.1..0.35) * w as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, y, x, *v as f32);
                    }
                }
            }
        }
    }
    img
}

/// Deterministic `(x_low, y)` pair in `[-1, 1]` for `seed`.
pub fn generate_pair(sampler: &PairSampler, seed: u64) -> (ImageTensor, ImageTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = scene(&mut rng, sampler.height, sampler.width, sampler.shapes);
    let k = draw_range(&mut rng, sampler.illumination) as f32;
    let sigma = draw_range(&mut rng, sampler.noise_sigma) as f32;
    let noise = ImageTensor::<f32>::randn(3, sampler.height, sampler.width, &mut rng);
    let low = clean
        .zip_map(&noise, |v, n| (v * k + sigma * n).clamp(0.0, 1.0))
        .expect("same shape");
    (low.from_unit_range(), clean.from_unit_range())
}

/// Held-out pairs drawn from a seed stream disjoint from training draws.
pub fn validation_set(
    sampler: &PairSampler,
    count: usize,
    seed: u64,
) -> Vec<(ImageTensor, ImageTensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..count)
        .map(|_| generate_pair(sampler, rng.random()))
        .collect()
}

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum PairSource {
    Synthetic(PairSampler),
    /// Full-size pairs; training draws random crops.
    Images(Vec<(ImageTensor, ImageTensor)>),
}

impl PairSource {
    pub fn draw(
        &self,
        rng: &mut impl Rng,
        height: usize,
        width: usize,
    ) -> Result<(ImageTensor, ImageTensor)> {
        match self {
            PairSource::Synthetic(s) => {
                let sampler = PairSampler {
                    height,
                    width,
                    ..s.clone()
                };
                Ok(generate_pair(&sampler, rng.random()))
            }
            PairSource::Images(pairs) => {
                if pairs.is_empty() {
                    return Err(Error::InvalidArgument("no training pairs".into()));
                }
                let (low, normal) = &pairs[rng.random_range(0..pairs.len())];
                if low.height() < height || low.width() < width {
                    return Err(Error::shape((height, width), (low.height(), low.width())));
                }
                let top = rng.random_range(0..=low.height() - height);
                let left = rng.random_range(0..=low.width() - width);
                Ok((
                    low.crop(top, left, height, width)?,
                    normal.crop(top, left, height, width)?,
                ))
            }
        }
    }
}

/// Loads every `{id}_low.png` / `{id}_normal.png` pair in `dir`, sorted by id.
pub fn load_pair_folder(dir: impl AsRef<Path>) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_low.png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let low: ImageTensor = load_png(dir.join(format!("{id}_low.png")))?;
            let normal: ImageTensor = load_png(dir.join(format!("{id}_normal.png")))?;
            low.same_shape(&normal)?;
            Ok((low, normal))
        })
        .collect()
}

/// Random stream for one sample of one iteration, so any iteration can be
/// replayed from the seed alone.
pub fn sample_rng(seed: u64, iteration: usize, sample: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(iteration as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(sample as u64);
    rng
}

/// One corrupted training input.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub t: usize,
    pub swap: bool,
    pub eps: ImageTensor,
    pub x_t: ImageTensor,
    /// Clean image at the resolution of step `t`.
    pub target: ImageTensor,
    pub cond: ConditionLevel,
}

/// Draws a pair, a uniform step in `1..=T`, noise and the swap decision.
pub fn draw_example(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    source: &PairSource,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let (x_low, y) = source.draw(rng, cfg.patch_height, cfg.patch_width)?;
    let t = rng.random_range(1..=ns.steps());
    let s = ps.factor(t);
    let cond = Condition::build(&x_low, &[s])?.base().clone();
    let target = downsample(&y, s)?;
    let eps = ImageTensor::randn(3, target.height(), target.width(), rng);
    let swap = rng.random_bool(cfg.swap_probability);
    let x_t = forward_marginal(ns, ps, &y, t, &eps)?;
    Ok(TrainingExample {
        t,
        swap,
        eps,
        x_t,
        target,
        cond,
    })
}

/// Models, optimiser moments and the number of completed iterations.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: ConvDenoiser,
    pub corrector: GlobalCorrector,
    pub denoiser_opt: Adam<f32>,
    pub corrector_opt: Adam<f32>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(denoiser_cfg: DenoiserConfig, cfg: &TrainConfig) -> Result<Self> {
        let denoiser = ConvDenoiser::new(denoiser_cfg, cfg.seed)?;
        let corrector = GlobalCorrector::new(cfg.seed.wrapping_add(1));
        Ok(Self {
            denoiser_opt: Adam::new(cfg.adam.clone(), denoiser.params()),
            corrector_opt: Adam::new(cfg.adam.clone(), corrector.params()),
            denoiser,
            corrector,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "iteration": self.iteration,
            "denoiser": self.denoiser.config(),
            "denoiser_opt_steps": self.denoiser_opt.steps_taken(),
            "corrector_opt_steps": self.corrector_opt.steps_taken(),
            "run": metadata,
        }));
        ck.insert_store("denoiser", self.denoiser.params());
        ck.insert_store("corrector", self.corrector.params());
        ck.insert(
            "optim/denoiser",
            &self.denoiser_opt.state_tensors(self.denoiser.params()),
        );
        ck.insert(
            "optim/corrector",
            &self.corrector_opt.state_tensors(self.corrector.params()),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, adam: &AdamConfig) -> Result<Self> {
        let meta = &ck.metadata;
        let field = |name: &str| {
            meta.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {name}")))
        };
        let denoiser_cfg: DenoiserConfig = serde_json::from_value(field("denoiser")?.clone())?;
        let as_u64 = |name: &str| -> Result<u64> {
            field(name)?
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("{name} is not an integer")))
        };
        let mut denoiser = ConvDenoiser::new(denoiser_cfg, 0)?;
        ck.restore_store("denoiser", denoiser.params_mut())?;
        let mut corrector = GlobalCorrector::new(0);
        ck.restore_store("corrector", corrector.params_mut())?;
        let denoiser_opt = Adam::restore(
            adam.clone(),
            denoiser.params(),
            as_u64("denoiser_opt_steps")?,
            &ck.namespace("optim/denoiser"),
        )?;
        let corrector_opt = Adam::restore(
            adam.clone(),
            corrector.params(),
            as_u64("corrector_opt_steps")?,
            &ck.namespace("optim/corrector"),
        )?;
        Ok(Self {
            denoiser,
            corrector,
            denoiser_opt,
            corrector_opt,
            iteration: as_u64("iteration")? as usize,
        })
    }
}

/// Models needed at inference time, restored from a training checkpoint.
pub fn load_models(dir: impl AsRef<Path>) -> Result<(ConvDenoiser, GlobalCorrector)> {
    let ck = Checkpoint::load(dir)?;
    let cfg: DenoiserConfig = serde_json::from_value(
        ck.metadata
            .get("denoiser")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("metadata lacks denoiser".into()))?,
    )?;
    let mut denoiser = ConvDenoiser::new(cfg, 0)?;
    ck.restore_store("denoiser", denoiser.params_mut())?;
    let mut corrector = GlobalCorrector::new(0);
    ck.restore_store("corrector", corrector.params_mut())?;
    Ok((denoiser, corrector))
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub denoiser_loss: f64,
    /// Mean over gated samples; `None` when no sample was gated.
    pub corrector_loss: Option<f64>,
    pub lr: f64,
    pub timesteps: Vec<usize>,
    pub gated: Vec<bool>,
    pub corrector_updated: bool,
}

impl StepReport {
    pub fn gate_rate(&self) -> f64 {
        self.gated.iter().filter(|&&g| g).count() as f64 / self.gated.len() as f64
    }
}

struct SampleOutcome {
    t: usize,
    gated: bool,
    denoiser_loss: f64,
    denoiser_grads: Gradients<f32>,
    corrector: Option<(f64, Gradients<f32>)>,
}

fn non_finite(what: &'static str, iteration: usize, detail: String) -> Error {
    Error::NonFinite {
        what,
        iteration,
        detail,
    }
}

fn run_sample(
    state: &TrainState,
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    cfg: &TrainConfig,
    source: &PairSource,
    index: usize,
) -> Result<SampleOutcome> {
    let it = state.iteration;
    let mut rng = sample_rng(cfg.seed, it, index);
    let ex = draw_example(ns, ps, source, cfg, &mut rng)?;
    let input = DenoiserInput {
        x_t: &ex.x_t,
        cond: &ex.cond,
        t: ex.t,
        alpha_bar: ns.alpha_bar(ex.t),
        swap_condition: ex.swap,
    };
    let (pred, cache) = state.denoiser.forward(&input)?;
    let (denoiser_loss, grad) = l1_loss(&pred, &ex.eps)?;
    let detail = || format!("sample {index}, t = {}", ex.t);
    if !denoiser_loss.is_finite() {
        return Err(non_finite("denoiser loss", it, detail()));
    }
    let denoiser_grads = state.denoiser.backward(&cache, &grad)?;
    if !denoiser_grads.is_finite() {
        return Err(non_finite("denoiser gradient", it, detail()));
    }
    drop(cache);
    let gated = gate(cfg.gamma, ns, ex.t)?;
    let corrector = if gated && cfg.train_corrector {
        // the reconstruction is a plain tensor here, so nothing flows back
        // into the denoiser from this loss
        let mut y_theta = reconstruct_x0(ns, &ex.x_t, &pred, ex.t)?;
        if cfg.corrector_shift > 0.0 {
            for c in 0..3 {
                let offset = rng.random_range(-cfg.corrector_shift..cfg.corrector_shift) as f32;
                y_theta.plane_mut(c).iter_mut().for_each(|v| *v += offset);
            }
        }
        let (out, cache) = state.corrector.forward(&y_theta, &ex.cond)?;
        let (loss, grad) = l1_loss(&out, &ex.target)?;
        if !loss.is_finite() {
            return Err(non_finite("corrector loss", it, detail()));
        }
        let grads = state.corrector.backward(&cache, &grad)?;
        if !grads.is_finite() {
            return Err(non_finite("corrector gradient", it, detail()));
        }
        Some((loss, grads))
    } else {
        None
    };
    Ok(SampleOutcome {
        t: ex.t,
        gated,
        denoiser_loss,
        denoiser_grads,
        corrector,
    })
}

/// One iteration: per-sample losses and gradients (computed in parallel,
/// summed in sample order), then an Adam step on the denoiser and, if any
/// sample was gated, on the corrector.
pub fn training_step(
    state: &mut TrainState,
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    cfg: &TrainConfig,
    source: &PairSource,
) -> Result<StepReport> {
    if state.denoiser.config().steps != ns.steps() {
        return Err(Error::InvalidArgument(format!(
            "denoiser embeds {} steps, schedule has {}",
            state.denoiser.config().steps,
            ns.steps()
        )));
    }
    let it = state.iteration;
    let lr = lr_schedule(cfg, it);
    let shared: &TrainState = state;
    let outcomes: Vec<SampleOutcome> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|i| run_sample(shared, ns, ps, cfg, source, i))
        .collect::<Result<_>>()?;

    let b = outcomes.len() as f64;
    let mut d_grads = state.denoiser.params().zero_grads();
    let mut c_grads = state.corrector.params().zero_grads();
    let mut d_loss = 0.0;
    let mut c_loss = 0.0;
    let mut n_corr = 0usize;
    for o in &outcomes {
        d_grads.add_assign(&o.denoiser_grads);
        d_loss += o.denoiser_loss;
        if let Some((loss, g)) = &o.corrector {
            c_grads.add_assign(g);
            c_loss += loss;
            n_corr += 1;
        }
    }
    d_grads.scale((1.0 / b) as f32);
    state
        .denoiser_opt
        .step(state.denoiser.params_mut(), &d_grads, lr);
    if n_corr > 0 {
        c_grads.scale((1.0 / n_corr as f64) as f32);
        state
            .corrector_opt
            .step(state.corrector.params_mut(), &c_grads, lr * cfg.corrector_lr_scale);
    }
    state.iteration += 1;
    Ok(StepReport {
        iteration: it,
        denoiser_loss: d_loss / b,
        corrector_loss: (n_corr > 0).then(|| c_loss / n_corr as f64),
        lr,
        timesteps: outcomes.iter().map(|o| o.t).collect(),
        gated: outcomes.iter().map(|o| o.gated).collect(),
        corrector_updated: n_corr > 0,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    iteration: usize,
    denoiser_loss: f64,
    corrector_loss: Option<f64>,
    lr: f64,
    gate_rate: f64,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Runs iterations until `cfg.iterations`, appending to the CSV log and
/// checkpointing into `out_dir`. Rows at or beyond the current iteration
/// (left by an interrupted run) are discarded first, so a resumed run yields
/// the same log as an uninterrupted one.
pub fn train(
    state: &mut TrainState,
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    cfg: &TrainConfig,
    source: &PairSource,
    out_dir: &Path,
    metadata: &serde_json::Value,
    mut on_step: impl FnMut(&StepReport),
) -> Result<PathBuf> {
    cfg.validate(ps)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut rows: Vec<LogRow> = Vec::new();
    if state.iteration > 0 && log_path.exists() {
        let mut reader = csv::Reader::from_path(&log_path)?;
        for row in reader.deserialize() {
            let row: LogRow = row?;
            if row.iteration < state.iteration {
                rows.push(row);
            }
        }
    }
    let mut writer = csv::Writer::from_path(&log_path)?;
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    while state.iteration < cfg.iterations {
        let report = training_step(state, ns, ps, cfg, source)?;
        writer.serialize(LogRow {
            iteration: report.iteration,
            denoiser_loss: report.denoiser_loss,
            corrector_loss: report.corrector_loss,
            lr: report.lr,
            gate_rate: report.gate_rate(),
        })?;
        on_step(&report);
        let every = cfg.checkpoint_every.max(1);
        if state.iteration % every == 0 || state.iteration == cfg.iterations {
            writer.flush().map_err(|e| Error::io(&log_path, e))?;
            state.to_checkpoint(metadata.clone()).save(&ck_dir)?;
        }
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    if !ck_dir.join(crate::checkpoint::MANIFEST_FILE).exists() {
        state.to_checkpoint(metadata.clone()).save(&ck_dir)?;
    }
    Ok(ck_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_halves_at_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert_eq!(lr_schedule(&cfg, 1563), 1.25e-5);
        let mut prev = f64::INFINITY;
        for i in 0..cfg.iterations {
            let lr = lr_schedule(&cfg, i);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn degenerate_generator_copies_scene() {
        let s = PairSampler {
            illumination: (1.0, 1.0),
            noise_sigma: (0.0, 0.0),
            ..PairSampler::default()
        };
        let (low, y) = generate_pair(&s, 9);
        assert_eq!(low, y);
    }

    #[test]
    fn pairs_are_reproducible_and_darker() {
        let s = PairSampler::default();
        for seed in 0..20 {
            let (low, y) = generate_pair(&s, seed);
            assert_eq!(generate_pair(&s, seed), (low.clone(), y.clone()));
            assert!(low.mean() < y.mean());
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn patch_must_fit_pyramid() {
        let cfg = TrainConfig {
            patch_height: 36,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(&PyramidSchedule::paper_default(2000)).is_err());
        assert!(TrainConfig::default()
            .validate(&PyramidSchedule::paper_default(2000))
            .is_ok());
    }
}
