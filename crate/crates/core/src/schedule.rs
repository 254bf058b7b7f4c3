//! Noise and downsampling schedules.
//!
//! Both schedules are indexed by the diffusion step `t` in `1..=T`. Index `0`
//! is kept as a convention slot: `alpha_bar(0) = 1` and `factor(0) = 1`, which
//! makes the final reverse step collapse to the clean estimate.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step retention factors and every scalar sequence derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of `alpha_t` from `alpha_start` (t = 1) to
    /// `alpha_end` (t = T).
    pub fn linear(steps: usize, alpha_start: f64, alpha_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if !(alpha_end > 0.0 && alpha_start < 1.0 && alpha_end <= alpha_start) {
            return Err(Error::Schedule(format!(
                "need 0 < alpha_end <= alpha_start < 1, got start={alpha_start} end={alpha_end}"
            )));
        }
        let alphas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    alpha_start
                } else {
                    let w = i as f64 / (steps - 1) as f64;
                    alpha_start + (alpha_end - alpha_start) * w
                }
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Builds a schedule from explicit `alpha_1..alpha_T`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Schedule(format!("alpha_{} = {a} outside (0, 1)", i + 1)));
            }
            if i > 0 && a > alphas[i - 1] {
                return Err(Error::Schedule(format!(
                    "alpha must be non-increasing, alpha_{} = {a} > alpha_{} = {}",
                    i + 1,
                    i,
                    alphas[i - 1]
                )));
            }
        }
        let steps = alphas.len();
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut beta = Vec::with_capacity(steps + 1);
        let mut beta_tilde = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        beta.push(0.0);
        beta_tilde.push(0.0);
        for a in alphas {
            let prev = *alpha_bar.last().unwrap();
            let ab = prev * a;
            let b = 1.0 - a;
            alpha.push(a);
            alpha_bar.push(ab);
            beta.push(b);
            beta_tilde.push((1.0 - prev) / (1.0 - ab) * b);
        }
        Ok(Self {
            alpha,
            alpha_bar,
            beta,
            beta_tilde,
        })
    }

    /// The paper-scale default: 2000 steps, alpha from 0.999999 down to 0.99.
    pub fn paper_default() -> Self {
        Self::linear(2000, 0.999999, 0.99).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar(0) == 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha[1..]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t)`: the gain applied to a
    /// noise-prediction error when reconstructing the clean image at step `t`.
    pub fn amplification_factor(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let ab = self.alpha_bar[t];
        Ok((1.0 - ab).sqrt() / ab.sqrt())
    }

    /// Replaces one posterior variance entry. Exists only so fault-injection
    /// checks can demonstrate that the verify suite notices a corrupted table.
    #[doc(hidden)]
    pub fn with_corrupted_beta_tilde(mut self, t: usize, value: f64) -> Self {
        self.beta_tilde[t] = value;
        self
    }
}

/// One contiguous run of steps sharing a downsampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    pub factor: usize,
    /// Least noisy step of the level.
    pub first: usize,
    /// Noisiest step of the level.
    pub last: usize,
}

impl Level {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-step downsampling factors `s_t`.
///
/// The schedule is resolution-agnostic; callers validate a concrete image
/// size with [`PyramidSchedule::check_resolution`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidSchedule {
    factors: Vec<usize>,
}

impl PyramidSchedule {
    /// Vanilla diffusion: every step at full resolution.
    pub fn constant(steps: usize) -> Self {
        Self {
            factors: vec![1; steps + 1],
        }
    }

    /// Paper default: full resolution for `t <= T/2`, half resolution above.
    pub fn paper_default(steps: usize) -> Self {
        Self::from_boundaries(steps, &[(0.5, 1), (1.0, 2)]).expect("valid constants")
    }

    /// Explicit `s_1..s_T`.
    pub fn from_factors(factors: Vec<usize>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if factors[0] != 1 {
            return Err(Error::Schedule(format!(
                "s_1 must be 1 so the output is at base resolution, got {}",
                factors[0]
            )));
        }
        for (i, &f) in factors.iter().enumerate() {
            if !f.is_power_of_two() {
                return Err(Error::Schedule(format!(
                    "s_{} = {f} is not a power of two",
                    i + 1
                )));
            }
            if i > 0 && f < factors[i - 1] {
                return Err(Error::Schedule(format!(
                    "factors must be non-decreasing in t, s_{} = {f} < s_{} = {}",
                    i + 1,
                    i,
                    factors[i - 1]
                )));
            }
        }
        let mut all = Vec::with_capacity(factors.len() + 1);
        all.push(1);
        all.extend(factors);
        Ok(Self { factors: all })
    }

    /// Piecewise-constant schedule from `(end fraction, factor)` pairs; level
    /// `i` covers steps up to `round(fraction_i * T)`. Fractions must be
    /// increasing and end at 1.
    pub fn from_boundaries(steps: usize, boundaries: &[(f64, usize)]) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if boundaries.is_empty() {
            return Err(Error::Schedule("at least one level is required".into()));
        }
        let mut prev = 0.0;
        for &(frac, _) in boundaries {
            if !(frac > prev && frac <= 1.0) {
                return Err(Error::Schedule(format!(
                    "level fractions must increase within (0, 1], got {frac} after {prev}"
                )));
            }
            prev = frac;
        }
        if (prev - 1.0).abs() > 1e-12 {
            return Err(Error::Schedule(format!(
                "level fractions must end at 1, got {prev}"
            )));
        }
        let mut factors = Vec::with_capacity(steps);
        let mut start = 0usize;
        for (i, &(frac, factor)) in boundaries.iter().enumerate() {
            let end = if i + 1 == boundaries.len() {
                steps
            } else {
                ((frac * steps as f64).round() as usize).min(steps)
            };
            factors.extend(std::iter::repeat_n(factor, end.saturating_sub(start)));
            start = start.max(end);
        }
        Self::from_factors(factors)
    }

    /// Parses the bracket notation `[a,b,c,d]`: `n` equal slices of the `T`
    /// steps, least noisy first, each with the listed factor.
    pub fn from_bracket(steps: usize, notation: &str) -> Result<Self> {
        let inner = notation
            .trim()
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::Schedule(format!("expected [a,b,...], got {notation:?}")))?;
        let factors = inner
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Schedule(format!("bad factor {s:?} in {notation:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if factors.is_empty() {
            return Err(Error::Schedule("empty bracket schedule".into()));
        }
        let n = factors.len() as f64;
        let boundaries: Vec<(f64, usize)> = factors
            .iter()
            .enumerate()
            .map(|(i, &f)| ((i + 1) as f64 / n, f))
            .collect();
        Self::from_boundaries(steps, &boundaries)
    }

    pub fn steps(&self) -> usize {
        self.factors.len() - 1
    }

    /// `s_t`, with `s_0 = 1`.
    pub fn factor(&self, t: usize) -> usize {
        self.factors[t]
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors[1..]
    }

    pub fn max_factor(&self) -> usize {
        *self.factors.last().unwrap()
    }

    /// Distinct factors in increasing order.
    pub fn distinct_factors(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.levels().iter().map(|l| l.factor).collect();
        v.dedup();
        v
    }

    /// Levels from least to most noisy.
    pub fn levels(&self) -> Vec<Level> {
        let mut out: Vec<Level> = Vec::new();
        for t in 1..=self.steps() {
            let f = self.factors[t];
            match out.last_mut() {
                Some(l) if l.factor == f => l.last = t,
                _ => out.push(Level {
                    factor: f,
                    first: t,
                    last: t,
                }),
            }
        }
        out
    }

    /// True when step `t` (>= 1) moves to a finer resolution on its way to `t - 1`.
    pub fn is_boundary(&self, t: usize) -> bool {
        self.factors[t] > self.factors[t - 1]
    }

    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let f = self.max_factor();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::NotDivisible {
                height,
                width,
                factor: f,
            });
        }
        Ok(())
    }

    /// Spatial size of `x_t` for a base image of `height x width`.
    pub fn level_resolution(&self, height: usize, width: usize, t: usize) -> (usize, usize) {
        let f = self.factors[t];
        (height / f, width / f)
    }

    /// Bracket notation when the schedule is an even split, else the explicit factors.
    pub fn describe(&self) -> String {
        let levels = self.levels();
        let parts: Vec<String> = levels.iter().map(|l| l.factor.to_string()).collect();
        format!("[{}]", parts.join(","))
    }
}

fn default_gamma() -> f64 {
    1.0
}

/// Sampling-time knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Correction threshold on the amplification factor.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Number of denoiser calls for DDIM; `None` runs all `T` DDPM steps.
    #[serde(default)]
    pub ddim_steps: Option<usize>,
    /// DDIM stochasticity, 0 is deterministic.
    #[serde(default)]
    pub ddim_eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Dump every intermediate `x_t` as a PYDT tensor into this directory.
    #[serde(skip)]
    pub dump_dir: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            ddim_steps: None,
            ddim_eta: 0.0,
            seed: 0,
            dump_dir: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, ns: &NoiseSchedule) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if let Some(n) = self.ddim_steps {
            if n == 0 || n > ns.steps() {
                return Err(Error::InvalidArgument(format!(
                    "ddim_steps must lie in 1..={}, got {n}",
                    ns.steps()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.ddim_eta) {
            return Err(Error::InvalidArgument(format!(
                "ddim_eta must lie in [0, 1], got {}",
                self.ddim_eta
            )));
        }
        Ok(())
    }
}

/// Amplification factor strictly above `gamma`.
pub fn needs_correction(cfg: &SamplerConfig, ns: &NoiseSchedule, t: usize) -> Result<bool> {
    gate(cfg.gamma, ns, t)
}

pub(crate) fn gate(gamma: f64, ns: &NoiseSchedule, t: usize) -> Result<bool> {
    Ok(ns.amplification_factor(t)? > gamma)
}
