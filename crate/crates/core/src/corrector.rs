//! Global corrector: a pixel-independent retoucher whose per-channel
//! modulation comes from pooled statistics of the image and its condition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::ConditionLevel;
use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::nn::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::real::Real;

/// Anything applied to the clean-image estimate on gated steps.
pub trait Corrector<R: Real>: Send + Sync {
    fn correct(&self, y: &ImageTensor<R>, cond: &ConditionLevel<R>) -> Result<ImageTensor<R>>;
}

const EXTRACTOR_WIDTHS: [usize; 3] = [16, 32, 32];
const BASE_WIDTH: usize = 32;
/// Length of the pooled condition vector.
pub const CONDITION_DIM: usize = 32;
const EXTRACTOR_INPUT: usize = 13;

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layers {
    extract: [Dense; 3],
    base: [Dense; 4],
    scale: [Dense; 3],
    shift: [Dense; 3],
}

/// `y + f(y; v)` where `f` is a stack of 1x1 convolutions modulated by the
/// condition vector `v`, and `v` is pooled from strided convolutions over
/// `(y, x_low, hiseq, pos)`.
///
/// The last base layer starts at zero, so a fresh corrector is the identity.
#[derive(Clone, Debug)]
pub struct GlobalCorrector<R: Real = f32> {
    params: ParamStore<R>,
    layers: Layers,
}

/// Activations of one [`GlobalCorrector::forward`] pass.
#[derive(Debug)]
pub struct CorrectorCache<R: Real> {
    tape: Tape<R>,
    output: Var,
}

impl<R: Real> CorrectorCache<R> {
    pub fn output(&self) -> &ImageTensor<R> {
        self.tape.value(self.output)
    }
}

impl<R: Real> GlobalCorrector<R> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore<R>, name: String, cin: usize, cout: usize, k: usize| {
            let fan_in = cin * k * k;
            Dense {
                weight: p.add_uniform(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, &mut rng),
                bias: p.add_zeros(format!("{name}.bias"), vec![cout]),
            }
        };
        let [e0, e1, e2] = EXTRACTOR_WIDTHS;
        let extract = [
            conv(&mut p, "cond0".into(), EXTRACTOR_INPUT, e0, 3),
            conv(&mut p, "cond1".into(), e0, e1, 3),
            conv(&mut p, "cond2".into(), e1, e2, 3),
        ];
        let base012 = [
            conv(&mut p, "base0".into(), 3, BASE_WIDTH, 1),
            conv(&mut p, "base1".into(), BASE_WIDTH, BASE_WIDTH, 1),
            conv(&mut p, "base2".into(), BASE_WIDTH, BASE_WIDTH, 1),
        ];
        let base3 = Dense {
            weight: p.add_zeros("base3.weight", vec![3, BASE_WIDTH, 1, 1]),
            bias: p.add_zeros("base3.bias", vec![3]),
        };
        let mut linear = |p: &mut ParamStore<R>, name: String| Dense {
            weight: p.add_uniform(
                format!("{name}.weight"),
                vec![BASE_WIDTH, CONDITION_DIM],
                CONDITION_DIM,
                &mut rng,
            ),
            bias: p.add_zeros(format!("{name}.bias"), vec![BASE_WIDTH]),
        };
        let scale = [0, 1, 2].map(|i| linear(&mut p, format!("scale{i}")));
        let shift = [0, 1, 2].map(|i| linear(&mut p, format!("shift{i}")));
        let layers = Layers {
            extract,
            base: [base012[0], base012[1], base012[2], base3],
            scale,
            shift,
        };
        Self { params: p, layers }
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn cast<S: Real>(&self) -> GlobalCorrector<S> {
        GlobalCorrector {
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn extractor_input(&self, y: &ImageTensor<R>, cond: &ConditionLevel<R>) -> Result<ImageTensor<R>> {
        if y.channels() != 3 {
            return Err(Error::shape(3, y.channels()));
        }
        ImageTensor::concat_channels(&[y, &cond.x_low, &cond.hiseq, &cond.pos])
    }

    fn extract(&self, tape: &mut Tape<R>, input: ImageTensor<R>) -> Result<Var> {
        let mut h = tape.leaf(input);
        for layer in &self.layers.extract {
            h = tape.conv(&self.params, h, layer.weight, layer.bias, 2, 1)?;
            h = tape.silu(h);
        }
        Ok(tape.global_avg_pool(h))
    }

    fn base(&self, tape: &mut Tape<R>, y: Var, v: Var) -> Result<Var> {
        let p = &self.params;
        let l = &self.layers;
        let mut h = y;
        for i in 0..3 {
            h = tape.conv(p, h, l.base[i].weight, l.base[i].bias, 1, 0)?;
            let s = tape.linear(p, v, l.scale[i].weight, l.scale[i].bias)?;
            let b = tape.linear(p, v, l.shift[i].weight, l.shift[i].bias)?;
            h = tape.modulate(h, s, b)?;
            h = tape.silu(h);
        }
        let delta = tape.conv(p, h, l.base[3].weight, l.base[3].bias, 1, 0)?;
        tape.add(y, delta)
    }

    /// Pooled condition vector (`CONDITION_DIM x 1 x 1`).
    pub fn condition_vector(
        &self,
        y: &ImageTensor<R>,
        cond: &ConditionLevel<R>,
    ) -> Result<ImageTensor<R>> {
        let mut tape = Tape::new(&self.params);
        let v = self.extract(&mut tape, self.extractor_input(y, cond)?)?;
        Ok(tape.value(v).clone())
    }

    /// Base path only, with an externally supplied condition vector.
    pub fn correct_with_vector(
        &self,
        y: &ImageTensor<R>,
        vector: &ImageTensor<R>,
    ) -> Result<ImageTensor<R>> {
        if vector.len() != CONDITION_DIM {
            return Err(Error::shape(CONDITION_DIM, vector.len()));
        }
        let mut tape = Tape::new(&self.params);
        let yv = tape.leaf(y.clone());
        let v = tape.leaf(vector.clone());
        let out = self.base(&mut tape, yv, v)?;
        Ok(tape.value(out).clone())
    }

    /// Corrects `y` and keeps the activations for [`backward`](Self::backward).
    pub fn forward(
        &self,
        y: &ImageTensor<R>,
        cond: &ConditionLevel<R>,
    ) -> Result<(ImageTensor<R>, CorrectorCache<R>)> {
        let input = self.extractor_input(y, cond)?;
        let mut tape = Tape::new(&self.params);
        let v = self.extract(&mut tape, input)?;
        let yv = tape.leaf(y.clone());
        let output = self.base(&mut tape, yv, v)?;
        let value = tape.value(output).clone();
        Ok((value, CorrectorCache { tape, output }))
    }

    /// Gradients of `sum(output_gradient * output)` with respect to the
    /// corrector's own parameters. The input `y` is a constant here, so no
    /// gradient reaches whatever produced it.
    pub fn backward(
        &self,
        cache: &CorrectorCache<R>,
        output_gradient: &ImageTensor<R>,
    ) -> Result<Gradients<R>> {
        let mut grads = self.params.zero_grads();
        cache
            .tape
            .backward(&self.params, cache.output, output_gradient, &mut grads)?;
        Ok(grads)
    }
}

impl<R: Real> Corrector<R> for GlobalCorrector<R> {
    fn correct(&self, y: &ImageTensor<R>, cond: &ConditionLevel<R>) -> Result<ImageTensor<R>> {
        self.forward(y, cond).map(|(out, _)| out)
    }
}
