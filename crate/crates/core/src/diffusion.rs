//! Forward corruption, clean-image reconstruction and the pyramid reverse
//! process (ancestral and DDIM variants).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corrector::Corrector;
use crate::denoiser::{DenoiserInput, NoisePredictor};
use crate::error::{Error, Result};
use crate::imageops::{
    downsample, histogram_equalize, position_encoding, save_tensor, upsample, ImageTensor,
};
use crate::real::Real;
use crate::schedule::{needs_correction, NoiseSchedule, PyramidSchedule, SamplerConfig};

/// Conditioning planes at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionLevel<R: Real = f32> {
    pub factor: usize,
    pub x_low: ImageTensor<R>,
    pub hiseq: ImageTensor<R>,
    pub pos: ImageTensor<R>,
}

impl<R: Real> ConditionLevel<R> {
    pub fn resolution(&self) -> (usize, usize) {
        (self.x_low.height(), self.x_low.width())
    }
}

/// The low-light input, its histogram-equalised version and the position
/// encoding, materialised once per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<R: Real = f32> {
    base: (usize, usize),
    levels: Vec<ConditionLevel<R>>,
}

impl<R: Real> Condition<R> {
    /// Equalises `x_low` at base resolution, then area-downsamples both for
    /// every requested factor.
    pub fn build(x_low: &ImageTensor<R>, factors: &[usize]) -> Result<Self> {
        let hiseq = histogram_equalize(x_low);
        Self::from_parts(x_low, &hiseq, factors)
    }

    pub fn for_schedule(x_low: &ImageTensor<R>, ps: &PyramidSchedule) -> Result<Self> {
        ps.check_resolution(x_low.height(), x_low.width())?;
        Self::build(x_low, &ps.distinct_factors())
    }

    /// Uses a precomputed equalisation.
    pub fn from_parts(
        x_low: &ImageTensor<R>,
        hiseq: &ImageTensor<R>,
        factors: &[usize],
    ) -> Result<Self> {
        x_low.same_shape(hiseq)?;
        let (h, w) = (x_low.height(), x_low.width());
        let mut factors = factors.to_vec();
        factors.sort_unstable();
        factors.dedup();
        let levels = factors
            .iter()
            .map(|&f| {
                Ok(ConditionLevel {
                    factor: f,
                    x_low: downsample(x_low, f)?,
                    hiseq: downsample(hiseq, f)?,
                    pos: position_encoding(h, w, f)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: (h, w),
            levels,
        })
    }

    pub fn base_resolution(&self) -> (usize, usize) {
        self.base
    }

    pub fn level(&self, factor: usize) -> Result<&ConditionLevel<R>> {
        self.levels
            .iter()
            .find(|l| l.factor == factor)
            .ok_or_else(|| Error::InvalidArgument(format!("no condition at factor {factor}")))
    }

    pub fn base(&self) -> &ConditionLevel<R> {
        &self.levels[0]
    }
}

/// `x_t` together with its step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState<R: Real = f32> {
    pub t: usize,
    pub x: ImageTensor<R>,
}

fn check_level_shape<R: Real>(
    ps: &PyramidSchedule,
    base: (usize, usize),
    t: usize,
    img: &ImageTensor<R>,
) -> Result<()> {
    let (h, w) = ps.level_resolution(base.0, base.1, t);
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::shape((h, w), (img.height(), img.width())));
    }
    Ok(())
}

/// `sqrt(abar_t) * (x0 downsampled by s_t) + sqrt(1 - abar_t) * eps`.
pub fn forward_marginal<R: Real>(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    x0: &ImageTensor<R>,
    t: usize,
    eps: &ImageTensor<R>,
) -> Result<ImageTensor<R>> {
    ns.check_step(t)?;
    let down = downsample(x0, ps.factor(t))?;
    let ab = ns.alpha_bar(t);
    down.lincomb(R::of(ab.sqrt()), eps, R::of((1.0 - ab).sqrt()))
}

/// One forward transition `x_{t-1} -> x_t`, downsampling by `s_t / s_{t-1}`.
pub fn forward_step<R: Real>(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    x_prev: &ImageTensor<R>,
    t: usize,
    eps: &ImageTensor<R>,
) -> Result<ImageTensor<R>> {
    ns.check_step(t)?;
    let down = downsample(x_prev, ps.factor(t) / ps.factor(t - 1))?;
    let a = ns.alpha(t);
    down.lincomb(R::of(a.sqrt()), eps, R::of((1.0 - a).sqrt()))
}

/// Clean-image estimate `(x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
pub fn reconstruct_x0<R: Real>(
    ns: &NoiseSchedule,
    x_t: &ImageTensor<R>,
    eps_pred: &ImageTensor<R>,
    t: usize,
) -> Result<ImageTensor<R>> {
    if t > ns.steps() {
        return Err(Error::StepOutOfRange {
            t,
            steps: ns.steps(),
        });
    }
    let ab = ns.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    x_t.lincomb(R::of(inv), eps_pred, R::of(-(1.0 - ab).sqrt() * inv))
}

/// Coefficients of the same-resolution posterior `q(x_{t-1} | x_t, x_0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

pub fn posterior(ns: &NoiseSchedule, t: usize) -> Result<Posterior> {
    ns.check_step(t)?;
    let ab = ns.alpha_bar(t);
    let ab_prev = ns.alpha_bar(t - 1);
    Ok(Posterior {
        coef_x0: ab_prev.sqrt() * ns.beta(t) / (1.0 - ab),
        coef_xt: ns.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        variance: ns.beta_tilde(t),
    })
}

/// Ancestral step `x_t -> x_{t-1}` given the clean estimate `y_prime`.
///
/// Within a level this is the Gaussian posterior. Crossing into a finer
/// level, `y_prime` is upsampled by `s_t / s_{t-1}` and re-noised to
/// `abar_{t-1}` with fresh noise. `eps` must have the resolution of `s_{t-1}`
/// and is ignored at `t = 1`.
pub fn reverse_step<R: Real>(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    state: &DiffusionState<R>,
    y_prime: &ImageTensor<R>,
    eps: &ImageTensor<R>,
) -> Result<DiffusionState<R>> {
    let t = state.t;
    ns.check_step(t)?;
    state.x.same_shape(y_prime)?;
    let (s_t, s_prev) = (ps.factor(t), ps.factor(t - 1));
    let x = if s_t > s_prev {
        let up = upsample(y_prime, s_t / s_prev)?;
        let ab_prev = ns.alpha_bar(t - 1);
        up.lincomb(R::of(ab_prev.sqrt()), eps, R::of((1.0 - ab_prev).sqrt()))?
    } else {
        let post = posterior(ns, t)?;
        let mean = y_prime.lincomb(R::of(post.coef_x0), &state.x, R::of(post.coef_xt))?;
        if t == 1 || post.variance == 0.0 {
            mean
        } else {
            mean.lincomb(R::one(), eps, R::of(post.variance.sqrt()))?
        }
    };
    Ok(DiffusionState { t: t - 1, x })
}

/// DDIM noise scale between `t` and `t_next`.
pub fn ddim_sigma(ns: &NoiseSchedule, t: usize, t_next: usize, eta: f64) -> f64 {
    let ab = ns.alpha_bar(t);
    let ab_next = ns.alpha_bar(t_next);
    eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt()
}

/// DDIM jump `x_t -> x_{t_next}` within one pyramid level.
///
/// The noise direction is re-derived from `y_prime`, so a corrected clean
/// estimate stays consistent with the state it produces.
pub fn ddim_step<R: Real>(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    state: &DiffusionState<R>,
    y_prime: &ImageTensor<R>,
    eps: &ImageTensor<R>,
    t_next: usize,
    eta: f64,
) -> Result<DiffusionState<R>> {
    let t = state.t;
    ns.check_step(t)?;
    if t_next >= t {
        return Err(Error::InvalidArgument(format!(
            "DDIM target {t_next} must precede {t}"
        )));
    }
    if ps.factor(t) != ps.factor(t_next) {
        return Err(Error::Schedule(format!(
            "DDIM jump {t} -> {t_next} crosses a resolution boundary ({} -> {})",
            ps.factor(t),
            ps.factor(t_next)
        )));
    }
    state.x.same_shape(y_prime)?;
    let ab = ns.alpha_bar(t);
    let ab_next = ns.alpha_bar(t_next);
    let eps_hat = state.x.lincomb(
        R::of(1.0 / (1.0 - ab).sqrt()),
        y_prime,
        R::of(-ab.sqrt() / (1.0 - ab).sqrt()),
    )?;
    let sigma = ddim_sigma(ns, t, t_next, eta);
    let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
    let mut x = y_prime.lincomb(R::of(ab_next.sqrt()), &eps_hat, R::of(dir))?;
    if sigma > 0.0 {
        x = x.lincomb(R::one(), eps, R::of(sigma))?;
    }
    Ok(DiffusionState { t: t_next, x })
}

/// Steps at which the denoiser is called for an `n`-call DDIM pass, noisiest
/// first.
///
/// Both endpoints of every level are always included so that no jump skips a
/// resolution change; the remaining calls are shared between levels in
/// proportion to their length and spaced uniformly inside each level.
pub fn ddim_timesteps(ps: &PyramidSchedule, n: usize) -> Result<Vec<usize>> {
    let levels = ps.levels();
    let minimum: Vec<usize> = levels.iter().map(|l| l.len().min(2)).collect();
    let required: usize = minimum.iter().sum();
    if n < required {
        return Err(Error::InvalidArgument(format!(
            "{n} DDIM steps cannot cover the endpoints of {} levels ({required} needed)",
            levels.len()
        )));
    }
    if n > ps.steps() {
        return Err(Error::InvalidArgument(format!(
            "{n} DDIM steps exceed {} diffusion steps",
            ps.steps()
        )));
    }
    // largest-remainder apportionment of the extra calls
    let extra = n - required;
    let capacity: Vec<usize> = levels
        .iter()
        .zip(&minimum)
        .map(|(l, m)| l.len() - m)
        .collect();
    let total_cap: usize = capacity.iter().sum();
    let mut alloc = minimum.clone();
    if extra > 0 {
        let quotas: Vec<f64> = capacity
            .iter()
            .map(|&c| extra as f64 * c as f64 / total_cap as f64)
            .collect();
        let mut given = 0;
        for (i, q) in quotas.iter().enumerate() {
            let k = (q.floor() as usize).min(capacity[i]);
            alloc[i] += k;
            given += k;
        }
        let mut order: Vec<usize> = (0..levels.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while given < extra {
            let l = order[i % order.len()];
            if alloc[l] < levels[l].len() {
                alloc[l] += 1;
                given += 1;
            }
            i += 1;
        }
    }
    let mut steps = Vec::with_capacity(n);
    for (level, &k) in levels.iter().zip(&alloc) {
        if k == 1 {
            steps.push(level.first);
            continue;
        }
        let span = (level.last - level.first) as f64;
        let mut prev = None;
        for i in 0..k {
            let mut s = level.first + (span * i as f64 / (k - 1) as f64).round() as usize;
            if let Some(p) = prev {
                if s <= p {
                    s = p + 1;
                }
            }
            steps.push(s);
            prev = Some(s);
        }
    }
    steps.sort_unstable_by(|a, b| b.cmp(a));
    steps.dedup();
    debug_assert_eq!(steps.len(), n);
    Ok(steps)
}

/// Full reverse pass from `x_T ~ N(0, I)` at the coarsest level down to a
/// base-resolution image clamped to `[-1, 1]`.
///
/// With `cfg.ddim_steps = None` every step of `T..1` is taken ancestrally;
/// otherwise the DDIM subsequence from [`ddim_timesteps`] is used, with
/// resolution changes taken by the ancestral upsample-and-renoise branch.
pub fn sample<R: Real>(
    ns: &NoiseSchedule,
    ps: &PyramidSchedule,
    cfg: &SamplerConfig,
    denoiser: &dyn NoisePredictor<R>,
    corrector: Option<&dyn Corrector<R>>,
    cond: &Condition<R>,
) -> Result<ImageTensor<R>> {
    cfg.validate(ns)?;
    if ps.steps() != ns.steps() {
        return Err(Error::Schedule(format!(
            "noise schedule has {} steps, pyramid schedule {}",
            ns.steps(),
            ps.steps()
        )));
    }
    let (h, w) = cond.base_resolution();
    ps.check_resolution(h, w)?;
    let channels = cond.base().x_low.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let big_t = ns.steps();
    let (th, tw) = ps.level_resolution(h, w, big_t);
    let mut state = DiffusionState {
        t: big_t,
        x: ImageTensor::randn(channels, th, tw, &mut rng),
    };
    let plan: Vec<usize> = match cfg.ddim_steps {
        None => (1..=big_t).rev().collect(),
        Some(n) => ddim_timesteps(ps, n)?,
    };
    if let Some(dir) = &cfg.dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        dump(dir, &state)?;
    }
    for (i, &t) in plan.iter().enumerate() {
        debug_assert_eq!(state.t, t);
        let level = cond.level(ps.factor(t))?;
        check_level_shape(ps, (h, w), t, &state.x)?;
        let eps_pred = denoiser.predict_noise(&DenoiserInput {
            x_t: &state.x,
            cond: level,
            t,
            alpha_bar: ns.alpha_bar(t),
            swap_condition: false,
        })?;
        let mut y = reconstruct_x0(ns, &state.x, &eps_pred, t)?;
        if let Some(c) = corrector {
            if needs_correction(cfg, ns, t)? {
                y = c.correct(&y, level)?;
            }
        }
        let t_next = plan.get(i + 1).copied().unwrap_or(0);
        let (nh, nw) = ps.level_resolution(h, w, t_next);
        state = if cfg.ddim_steps.is_none() || ps.factor(t) != ps.factor(t_next) {
            if t_next != t - 1 {
                return Err(Error::Schedule(format!(
                    "step plan jumps {t} -> {t_next} across a resolution boundary"
                )));
            }
            let eps = if t > 1 {
                ImageTensor::randn(channels, nh, nw, &mut rng)
            } else {
                ImageTensor::zeros(channels, nh, nw)
            };
            reverse_step(ns, ps, &state, &y, &eps)?
        } else {
            let eps = if ddim_sigma(ns, t, t_next, cfg.ddim_eta) > 0.0 {
                ImageTensor::randn(channels, nh, nw, &mut rng)
            } else {
                ImageTensor::zeros(channels, nh, nw)
            };
            ddim_step(ns, ps, &state, &y, &eps, t_next, cfg.ddim_eta)?
        };
        if let Some(dir) = &cfg.dump_dir {
            dump(dir, &state)?;
        }
    }
    debug_assert_eq!(state.t, 0);
    Ok(state.x.clamp(-R::one(), R::one()))
}

fn dump<R: Real>(dir: &Path, state: &DiffusionState<R>) -> Result<()> {
    save_tensor(&state.x, dir.join(format!("x_{:05}.pydt", state.t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ddim_plan_respects_levels() {
        let ps = PyramidSchedule::paper_default(2000);
        assert_eq!(ddim_timesteps(&ps, 4).unwrap(), vec![2000, 1001, 1000, 1]);
        assert!(ddim_timesteps(&ps, 3).is_err());
        let plan = ddim_timesteps(&ps, 10).unwrap();
        assert_eq!(plan.len(), 10);
        assert!(plan.contains(&1001) && plan.contains(&1000));
        let cs = PyramidSchedule::constant(2000);
        assert_eq!(ddim_timesteps(&cs, 4).unwrap(), vec![2000, 1334, 667, 1]);
        assert!(ddim_timesteps(&cs, 1).is_err());
        let all = ddim_timesteps(&PyramidSchedule::from_bracket(12, "[1,2,4]").unwrap(), 12);
        assert_eq!(all.unwrap(), (1..=12).rev().collect::<Vec<_>>());
    }

    #[test]
    fn posterior_at_first_step_is_deterministic() {
        let ns = NoiseSchedule::linear(10, 0.99, 0.9).unwrap();
        let p = posterior(&ns, 1).unwrap();
        assert_eq!(p.variance, 0.0);
        assert!((p.coef_x0 - 1.0).abs() < 1e-12);
        assert_eq!(p.coef_xt, 0.0);
    }

    #[test]
    fn boundary_step_with_zero_noise_is_scaled_upsample() {
        let ns = NoiseSchedule::linear(4, 0.99, 0.9).unwrap();
        let ps = PyramidSchedule::from_bracket(4, "[1,1,2,2]").unwrap();
        let y = ImageTensor::<f64>::from_fn(3, 2, 3, |c, y, x| 0.1 * (c + y + 2 * x) as f64 - 0.3);
        let state = DiffusionState {
            t: 3,
            x: ImageTensor::zeros(3, 2, 3),
        };
        let out = reverse_step(&ns, &ps, &state, &y, &ImageTensor::zeros(3, 4, 6)).unwrap();
        let want = upsample(&y, 2).unwrap().scale(ns.alpha_bar(2).sqrt());
        assert_eq!(out.t, 2);
        for (a, b) in out.x.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn last_step_returns_clean_estimate() {
        let ns = NoiseSchedule::linear(4, 0.99, 0.9).unwrap();
        let ps = PyramidSchedule::constant(4);
        let y = ImageTensor::<f64>::filled(3, 2, 2, 0.25);
        let state = DiffusionState {
            t: 1,
            x: ImageTensor::filled(3, 2, 2, -0.9),
        };
        let noise = ImageTensor::filled(3, 2, 2, 5.0);
        let out = reverse_step(&ns, &ps, &state, &y, &noise).unwrap();
        for v in out.x.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_boundary_crossing() {
        let ns = NoiseSchedule::linear(4, 0.99, 0.9).unwrap();
        let ps = PyramidSchedule::from_bracket(4, "[1,1,2,2]").unwrap();
        let state = DiffusionState {
            t: 3,
            x: ImageTensor::<f32>::zeros(3, 2, 2),
        };
        let y = ImageTensor::zeros(3, 2, 2);
        assert!(ddim_step(&ns, &ps, &state, &y, &y, 1, 0.0).is_err());
        assert!(ddim_step(&ns, &ps, &state, &y, &y, 3, 0.0).is_err());
    }

    #[test]
    fn forward_marginal_closed_forms() {
        let ns = NoiseSchedule::from_alphas(vec![0.25]).unwrap();
        let ps = PyramidSchedule::constant(1);
        let x0 = ImageTensor::<f64>::filled(3, 2, 2, 1.0);
        let zero = ImageTensor::zeros(3, 2, 2);
        let xt = forward_marginal(&ns, &ps, &x0, 1, &zero).unwrap();
        assert!(xt.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let ns = NoiseSchedule::from_alphas(vec![1.0 - 1e-15]).unwrap();
        let xt = forward_marginal(&ns, &ps, &x0, 1, &zero).unwrap();
        assert!(xt.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(forward_marginal(&ns, &ps, &x0, 1, &ImageTensor::zeros(3, 1, 1)).is_err());
    }

    #[test]
    fn reconstruction_with_unit_alpha_bar_is_identity() {
        let ns = NoiseSchedule::linear(3, 0.9, 0.8).unwrap();
        let x = ImageTensor::<f64>::filled(1, 2, 2, 0.3);
        let e = ImageTensor::<f64>::filled(1, 2, 2, 7.0);
        assert_eq!(reconstruct_x0(&ns, &x, &e, 0).unwrap(), x);
    }
}
