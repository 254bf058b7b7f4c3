//! Noise predictors: the contract used by the sampler, an analytic oracle
//! for Gaussian data and a small trainable encoder-decoder.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionLevel;
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::nn::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::real::Real;

/// Arguments of one noise prediction at step `t`.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a, R: Real = f32> {
    pub x_t: &'a ImageTensor<R>,
    pub cond: &'a ConditionLevel<R>,
    pub t: usize,
    pub alpha_bar: f64,
    /// Feed the equalised image before the low-light image.
    pub swap_condition: bool,
}

impl<R: Real> DenoiserInput<'_, R> {
    fn check(&self) -> Result<()> {
        let shape = (self.x_t.height(), self.x_t.width());
        for plane in [&self.cond.x_low, &self.cond.hiseq, &self.cond.pos] {
            if (plane.height(), plane.width()) != shape {
                return Err(Error::shape(shape, (plane.height(), plane.width())));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha_bar) {
            return Err(Error::InvalidArgument(format!(
                "alpha_bar {} outside [0, 1]",
                self.alpha_bar
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor<R: Real>: Send + Sync {
    fn predict_noise(&self, input: &DenoiserInput<R>) -> Result<ImageTensor<R>>;
}

/// Bayes-optimal noise predictor when every pixel of channel `c` is drawn
/// independently from `N(mu[c], sigma0[c]^2)`.
///
/// The prior is per pixel, so the same predictor is optimal at every pyramid
/// level for a target whose pixels are all equal.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracleDenoiser {
    mu: Vec<f64>,
    sigma0: Vec<f64>,
}

impl GaussianOracleDenoiser {
    /// `sigma0 = 0` is accepted as the delta-prior limit.
    pub fn new(mu: Vec<f64>, sigma0: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma0.len() || mu.is_empty() {
            return Err(Error::InvalidArgument(
                "mu and sigma0 must be non-empty and of equal length".into(),
            ));
        }
        if sigma0.iter().any(|s| !s.is_finite() || *s < 0.0) || mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(
                "oracle moments must be finite with sigma0 >= 0".into(),
            ));
        }
        Ok(Self { mu, sigma0 })
    }

    pub fn uniform(channels: usize, mu: f64, sigma0: f64) -> Result<Self> {
        Self::new(vec![mu; channels], vec![sigma0; channels])
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma0(&self) -> &[f64] {
        &self.sigma0
    }

    /// Posterior mean of the clean value given `x_t`.
    pub fn posterior_mean(&self, channel: usize, x_t: f64, alpha_bar: f64) -> f64 {
        let (mu, var) = (self.mu[channel], self.sigma0[channel].powi(2));
        (alpha_bar.sqrt() * var * x_t + (1.0 - alpha_bar) * mu)
            / (alpha_bar * var + (1.0 - alpha_bar))
    }

    /// `E[eps | x_t]` for one scalar.
    pub fn optimal_noise(&self, channel: usize, x_t: f64, alpha_bar: f64) -> f64 {
        let m = self.posterior_mean(channel, x_t, alpha_bar);
        (x_t - alpha_bar.sqrt() * m) / (1.0 - alpha_bar).sqrt()
    }
}

impl<R: Real> NoisePredictor<R> for GaussianOracleDenoiser {
    fn predict_noise(&self, input: &DenoiserInput<R>) -> Result<ImageTensor<R>> {
        input.check()?;
        let x = input.x_t;
        if x.channels() != self.mu.len() {
            return Err(Error::shape(self.mu.len(), x.channels()));
        }
        if input.alpha_bar >= 1.0 {
            return Ok(ImageTensor::zeros(x.channels(), x.height(), x.width()));
        }
        let mut out = x.clone();
        for c in 0..x.channels() {
            for v in out.plane_mut(c) {
                *v = R::of(self.optimal_noise(c, v.f64(), input.alpha_bar));
            }
        }
        Ok(out)
    }
}

pub const TIME_CHANNELS: usize = 8;
const TIME_FREQUENCIES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// `[sin(2 pi f t / T) for f in 1/2,1,2,4]` followed by the matching cosines.
/// The half frequency keeps t = 0 and t = T apart.
pub fn time_features(t: usize, steps: usize) -> [f64; TIME_CHANNELS] {
    let phase = TAU * t as f64 / steps.max(1) as f64;
    let mut out = [0.0; TIME_CHANNELS];
    for (i, f) in TIME_FREQUENCIES.iter().enumerate() {
        out[i] = (phase * f).sin();
        out[i + 4] = (phase * f).cos();
    }
    out
}

/// [`time_features`] broadcast to constant planes.
pub fn time_embedding<R: Real>(
    t: usize,
    steps: usize,
    height: usize,
    width: usize,
) -> ImageTensor<R> {
    let f = time_features(t, steps);
    ImageTensor::from_fn(TIME_CHANNELS, height, width, |c, _, _| R::of(f[c]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Feature widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Diffusion length used to normalise the time embedding.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            steps: 2000,
        }
    }
}

/// Image, low-light, equalised and position planes.
pub const CONDITIONED_CHANNELS: usize = 13;

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Layers {
    enc0a: ConvLayer,
    enc0b: ConvLayer,
    down1: ConvLayer,
    enc1: ConvLayer,
    down2: ConvLayer,
    mid: ConvLayer,
    dec1: ConvLayer,
    dec0: ConvLayer,
    out: ConvLayer,
}

/// Layer names, input channels, output channels and strides.
fn layer_specs(widths: [usize; 3]) -> [(&'static str, usize, usize, usize); 9] {
    let [w0, w1, w2] = widths;
    let cin = CONDITIONED_CHANNELS + TIME_CHANNELS;
    [
        ("enc0a", cin, w0, 1),
        ("enc0b", w0, w0, 1),
        ("down1", w0, w1, 2),
        ("enc1", w1, w1, 1),
        ("down2", w1, w2, 2),
        ("mid", w2, w2, 1),
        ("dec1", w2 + w1, w1, 1),
        ("dec0", w1 + w0, w0, 1),
        ("out", w0, 3, 1),
    ]
}

/// Three-level convolutional encoder-decoder predicting the noise in `x_t`.
///
/// The noise estimate is `sqrt(1 - abar) * x_t + sqrt(abar) * f(input)` with
/// `f` the network, so at the noisiest steps it follows `x_t` and errors in `f`
/// reach the clean-image estimate with weight at most one.
///
/// Input planes are `x_t`, the two low-light conditions (order selectable per
/// call), the position encoding and eight time-embedding planes. Every
/// convolution is 3x3; downsampling uses stride 2 and upsampling is
/// nearest-neighbour followed by concatenation with the encoder features.
#[derive(Clone, Debug)]
pub struct ConvDenoiser<R: Real = f32> {
    config: DenoiserConfig,
    params: ParamStore<R>,
    layers: Layers,
}

/// Activations of one forward pass, needed for [`ConvDenoiser::backward`].
#[derive(Debug)]
pub struct ForwardCache<R: Real> {
    tape: Tape<R>,
    output: Var,
    /// `sqrt(abar)`, the weight of the network output in the noise estimate.
    output_scale: R,
}

impl<R: Real> ConvDenoiser<R> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) || config.steps == 0 {
            return Err(Error::InvalidArgument(
                "denoiser widths and steps must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut make = |name: &str, cin: usize, cout: usize, stride: usize| {
            let fan_in = cin * 9;
            let weight =
                params.add_uniform(format!("{name}.weight"), vec![cout, cin, 3, 3], fan_in, &mut rng);
            let bias = params.add_zeros(format!("{name}.bias"), vec![cout]);
            ConvLayer {
                weight,
                bias,
                stride,
            }
        };
        let specs = layer_specs(config.widths);
        let mut built: Vec<ConvLayer> = specs
            .iter()
            .map(|&(n, i, o, s)| make(n, i, o, s))
            .collect();
        let mut next = || built.remove(0);
        let layers = Layers {
            enc0a: next(),
            enc0b: next(),
            down1: next(),
            enc1: next(),
            down2: next(),
            mid: next(),
            dec1: next(),
            dec0: next(),
            out: next(),
        };
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<S: Real>(&self) -> ConvDenoiser<S> {
        ConvDenoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Network input planes in channel order.
    pub fn assemble_input(&self, input: &DenoiserInput<R>) -> Result<ImageTensor<R>> {
        input.check()?;
        let x = input.x_t;
        if x.channels() != 3 {
            return Err(Error::shape(3, x.channels()));
        }
        let (h, w) = (x.height(), x.width());
        let time = time_embedding(input.t, self.config.steps, h, w);
        let (first, second) = if input.swap_condition {
            (&input.cond.hiseq, &input.cond.x_low)
        } else {
            (&input.cond.x_low, &input.cond.hiseq)
        };
        ImageTensor::concat_channels(&[x, first, second, &input.cond.pos, &time])
    }

    /// Runs the network and keeps the activations.
    pub fn forward(&self, input: &DenoiserInput<R>) -> Result<(ImageTensor<R>, ForwardCache<R>)> {
        let (h, w) = (input.x_t.height(), input.x_t.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: 4,
            });
        }
        let data = self.assemble_input(input)?;
        let p = &self.params;
        let l = &self.layers;
        let mut tape = Tape::new(p);
        let conv = |tape: &mut Tape<R>, x: Var, layer: ConvLayer, act: bool| -> Result<Var> {
            let y = tape.conv(p, x, layer.weight, layer.bias, layer.stride, 1)?;
            Ok(if act { tape.silu(y) } else { y })
        };
        let x = tape.leaf(data);
        let h0 = conv(&mut tape, x, l.enc0a, true)?;
        let skip0 = conv(&mut tape, h0, l.enc0b, true)?;
        let h1 = conv(&mut tape, skip0, l.down1, true)?;
        let skip1 = conv(&mut tape, h1, l.enc1, true)?;
        let h2 = conv(&mut tape, skip1, l.down2, true)?;
        let mid = conv(&mut tape, h2, l.mid, true)?;
        let up1 = tape.up_nearest(mid, 2);
        let cat1 = tape.concat(&[up1, skip1])?;
        let d1 = conv(&mut tape, cat1, l.dec1, true)?;
        let up0 = tape.up_nearest(d1, 2);
        let cat0 = tape.concat(&[up0, skip0])?;
        let d0 = conv(&mut tape, cat0, l.dec0, true)?;
        let output = conv(&mut tape, d0, l.out, false)?;
        let keep = R::of(input.alpha_bar.sqrt());
        let carry = R::of((1.0 - input.alpha_bar).sqrt());
        let value = tape
            .value(output)
            .zip_map(input.x_t, |f, x| carry * x + keep * f)?;
        Ok((
            value,
            ForwardCache {
                tape,
                output,
                output_scale: keep,
            },
        ))
    }

    /// Gradients of `sum(output_gradient * output)` with respect to every
    /// parameter, using activations from the matching [`forward`](Self::forward).
    pub fn backward(
        &self,
        cache: &ForwardCache<R>,
        output_gradient: &ImageTensor<R>,
    ) -> Result<Gradients<R>> {
        let mut grads = self.params.zero_grads();
        let scaled = output_gradient.map(|g| g * cache.output_scale);
        cache
            .tape
            .backward(&self.params, cache.output, &scaled, &mut grads)?;
        Ok(grads)
    }

    /// Multiply-accumulates of one forward pass at `height x width`.
    pub fn conv_macs(&self, height: usize, width: usize) -> u64 {
        conv_macs(self.config.widths, height, width)
    }
}

/// Multiply-accumulates of one [`ConvDenoiser`] forward pass.
pub fn conv_macs(widths: [usize; 3], height: usize, width: usize) -> u64 {
    let pixels = (height * width) as u64;
    layer_specs(widths)
        .iter()
        .map(|&(name, cin, cout, _)| {
            let div = match name {
                "enc0a" | "enc0b" | "dec0" | "out" => 1,
                "down1" | "enc1" | "dec1" => 4,
                _ => 16,
            };
            pixels / div * (cin * cout * 9) as u64
        })
        .sum()
}

impl<R: Real> NoisePredictor<R> for ConvDenoiser<R> {
    fn predict_noise(&self, input: &DenoiserInput<R>) -> Result<ImageTensor<R>> {
        self.forward(input).map(|(out, _)| out)
    }
}

/// L1 loss `mean |pred - target|` and its subgradient with respect to `pred`
/// (zero where the two agree exactly).
pub fn l1_loss<R: Real>(
    pred: &ImageTensor<R>,
    target: &ImageTensor<R>,
) -> Result<(f64, ImageTensor<R>)> {
    pred.same_shape(target)?;
    let n = pred.len() as f64;
    let scale = R::of(1.0 / n);
    let mut sum = 0.0;
    let grad = pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > R::zero() {
            scale
        } else if d < R::zero() {
            -scale
        } else {
            R::zero()
        }
    })?;
    for (p, t) in pred.data().iter().zip(target.data()) {
        sum += (p.f64() - t.f64()).abs();
    }
    Ok((sum / n, grad))
}
