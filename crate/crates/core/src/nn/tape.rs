//! A small reverse-mode tape over channel-major activations.
//!
//! Values are [`ImageTensor`]s (vectors are `C x 1 x 1`). Every operation
//! appends a node holding its output and whatever it needs for the backward
//! sweep; [`Tape::backward`] walks the nodes in reverse and accumulates
//! parameter gradients into a [`Gradients`] buffer.

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::real::{gemm, Layout, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R: Real> {
    Leaf,
    Conv {
        x: Var,
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
        stride: usize,
        pad: usize,
        /// im2col matrix `(cin * k * k) x (oh * ow)`; empty for 1x1 kernels.
        cols: Vec<R>,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    UpNearest(Var, usize),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: ParamId,
        bias: ParamId,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
}

#[derive(Debug)]
struct Node<R: Real> {
    value: ImageTensor<R>,
    op: Op<R>,
}

/// Recorded forward pass of one model.
#[derive(Debug)]
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    stamp: (u64, u64),
}

fn conv_out(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

fn im2col<R: Real>(
    x: &ImageTensor<R>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    let (c, h, w) = x.shape();
    let p = oh * ow;
    let mut cols = vec![R::zero(); c * kernel * kernel * p];
    for ci in 0..c {
        let plane = x.plane(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // contiguous run with clipped ends
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(ow);
                        if lo < hi {
                            let start = lo + kx - pad;
                            d[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, slot) in d.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *slot = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<R: Real>(
    dcols: &[R],
    dx: &mut ImageTensor<R>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = dx.shape();
    let p = oh * ow;
    for ci in 0..c {
        let plane = dx.plane_mut(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

impl<R: Real> Tape<R> {
    pub fn new(params: &ParamStore<R>) -> Self {
        Self {
            nodes: Vec::new(),
            stamp: params.stamp(),
        }
    }

    pub fn stamp(&self) -> (u64, u64) {
        self.stamp
    }

    pub fn value(&self, v: Var) -> &ImageTensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ImageTensor<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ImageTensor<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// 2-D convolution with weight `[cout, cin, k, k]` and bias `[cout]`.
    pub fn conv(
        &mut self,
        params: &ParamStore<R>,
        x: Var,
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let shape = &params.get(weight).shape;
        let (cout, cin, kernel) = (shape[0], shape[1], shape[2]);
        let input = self.value(x);
        let (c, h, w) = input.shape();
        if c != cin {
            return Err(Error::shape(
                format!("{cin} input channels for {}", params.get(weight).name),
                c,
            ));
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape(format!("at least {kernel} pixels"), (h, w)));
        }
        let (oh, ow) = (conv_out(h, kernel, stride, pad), conv_out(w, kernel, stride, pad));
        let p = oh * ow;
        let pointwise = kernel == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            Vec::new()
        } else {
            im2col(input, kernel, stride, pad, oh, ow)
        };
        let b = params.data(bias);
        let mut out = vec![R::zero(); cout * p];
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b[co]);
        }
        let k = cin * kernel * kernel;
        let rhs = if pointwise { input.data() } else { &cols[..] };
        gemm(
            cout,
            k,
            p,
            R::one(),
            params.data(weight),
            Layout::Normal,
            rhs,
            Layout::Normal,
            R::one(),
            &mut out,
        );
        let value = ImageTensor::from_vec(cout, oh, ow, out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                kernel,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).lincomb(R::one(), self.value(b), R::one())?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&ImageTensor<R>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ImageTensor::concat_channels(&refs)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn up_nearest(&mut self, x: Var, r: usize) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.shape();
        let value = ImageTensor::from_fn(c, h * r, w * r, |ch, y, xx| src.get(ch, y / r, xx / r));
        self.push(value, Op::UpNearest(x, r))
    }

    /// Spatial mean per channel, as a `C x 1 x 1` vector.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.channels();
        let data = (0..c).map(|ch| R::of(src.channel_mean(ch))).collect();
        let value = ImageTensor::from_vec(c, 1, 1, data).expect("consistent shape");
        self.push(value, Op::GlobalAvgPool(x))
    }

    /// Dense layer on a `C x 1 x 1` vector with weight `[out, C]`, bias `[out]`.
    pub fn linear(
        &mut self,
        params: &ParamStore<R>,
        x: Var,
        weight: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let shape = &params.get(weight).shape;
        let (o, i) = (shape[0], shape[1]);
        let input = self.value(x);
        if input.len() != i {
            return Err(Error::shape(i, input.len()));
        }
        let mut out = params.data(bias).to_vec();
        gemm(
            o,
            i,
            1,
            R::one(),
            params.data(weight),
            Layout::Normal,
            input.data(),
            Layout::Normal,
            R::one(),
            &mut out,
        );
        let value = ImageTensor::from_vec(o, 1, 1, out)?;
        Ok(self.push(value, Op::Linear { x, weight, bias }))
    }

    /// Per-channel `x * (1 + scale) + shift`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let src = self.value(x);
        let (s, b) = (self.value(scale), self.value(shift));
        if s.len() != src.channels() || b.len() != src.channels() {
            return Err(Error::shape(src.channels(), (s.len(), b.len())));
        }
        let mut value = src.clone();
        for c in 0..src.channels() {
            let (g, o) = (R::one() + s.data()[c], b.data()[c]);
            for v in value.plane_mut(c) {
                *v = *v * g + o;
            }
        }
        Ok(self.push(value, Op::Modulate { x, scale, shift }))
    }

    /// Reverse sweep from `output` seeded with `output_grad`. Gradients are
    /// accumulated into `grads`, which must be aligned with `params`.
    pub fn backward(
        &self,
        params: &ParamStore<R>,
        output: Var,
        output_grad: &ImageTensor<R>,
        grads: &mut Gradients<R>,
    ) -> Result<()> {
        if params.stamp() != self.stamp {
            return Err(Error::StaleCache);
        }
        self.value(output).same_shape(output_grad)?;
        let mut adj: Vec<Option<ImageTensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(output_grad.clone());

        fn acc<R: Real>(slot: &mut Option<ImageTensor<R>>, g: ImageTensor<R>) {
            match slot {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    kernel,
                    stride,
                    pad,
                    cols,
                } => {
                    let input = self.value(*x);
                    let (cin, h, w) = input.shape();
                    let (cout, oh, ow) = g.shape();
                    let p = oh * ow;
                    let k = cin * kernel * kernel;
                    let rhs = if cols.is_empty() { input.data() } else { &cols[..] };
                    gemm(
                        cout,
                        p,
                        k,
                        R::one(),
                        g.data(),
                        Layout::Normal,
                        rhs,
                        Layout::Transposed,
                        R::one(),
                        &mut grads.grads[weight.0],
                    );
                    let gb = &mut grads.grads[bias.0];
                    for (co, plane) in g.data().chunks(p).enumerate() {
                        gb[co] += R::of(plane.iter().map(|v| v.f64()).sum::<f64>());
                    }
                    if matches!(self.nodes[x.0].op, Op::Leaf) {
                        continue;
                    }
                    let mut dcols = vec![R::zero(); k * p];
                    gemm(
                        k,
                        cout,
                        p,
                        R::one(),
                        params.data(*weight),
                        Layout::Transposed,
                        g.data(),
                        Layout::Normal,
                        R::zero(),
                        &mut dcols,
                    );
                    let dx = if cols.is_empty() {
                        ImageTensor::from_vec(cin, h, w, dcols)?
                    } else {
                        let mut dx = ImageTensor::zeros(cin, h, w);
                        col2im_add(&dcols, &mut dx, *kernel, *stride, *pad, oh, ow);
                        dx
                    };
                    acc(&mut adj[x.0], dx);
                }
                Op::Silu(x) => {
                    let input = self.value(*x);
                    let dx = input
                        .zip_map(&g, |v, gv| {
                            let s = sigmoid(v);
                            gv * s * (R::one() + v * (R::one() - s))
                        })
                        .expect("same shape");
                    acc(&mut adj[x.0], dx);
                }
                Op::Add(a, b) => {
                    acc(&mut adj[b.0], g.clone());
                    acc(&mut adj[a.0], g);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for v in parts {
                        let c = self.value(*v).channels();
                        acc(&mut adj[v.0], g.select_channels(start..start + c));
                        start += c;
                    }
                }
                Op::UpNearest(x, r) => {
                    let (c, h, w) = self.value(*x).shape();
                    let r = *r;
                    let dx = ImageTensor::from_fn(c, h, w, |ch, y, xx| {
                        let mut s = R::zero();
                        for dy in 0..r {
                            for dx in 0..r {
                                s += g.get(ch, y * r + dy, xx * r + dx);
                            }
                        }
                        s
                    });
                    acc(&mut adj[x.0], dx);
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).shape();
                    let inv = R::of(1.0 / (h * w) as f64);
                    let dx = ImageTensor::from_fn(c, h, w, |ch, _, _| g.data()[ch] * inv);
                    acc(&mut adj[x.0], dx);
                }
                Op::Linear { x, weight, bias } => {
                    let input = self.value(*x);
                    let o = g.len();
                    let i = input.len();
                    gemm(
                        o,
                        1,
                        i,
                        R::one(),
                        g.data(),
                        Layout::Normal,
                        input.data(),
                        Layout::Normal,
                        R::one(),
                        &mut grads.grads[weight.0],
                    );
                    for (a, b) in grads.grads[bias.0].iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                    let mut dx = vec![R::zero(); i];
                    gemm(
                        i,
                        o,
                        1,
                        R::one(),
                        params.data(*weight),
                        Layout::Transposed,
                        g.data(),
                        Layout::Normal,
                        R::zero(),
                        &mut dx,
                    );
                    acc(&mut adj[x.0], ImageTensor::from_vec(i, 1, 1, dx)?);
                }
                Op::Modulate { x, scale, shift } => {
                    let input = self.value(*x);
                    let s = self.value(*scale);
                    let c = input.channels();
                    let mut dx = g.clone();
                    let mut ds = vec![R::zero(); c];
                    let mut db = vec![R::zero(); c];
                    for ch in 0..c {
                        let gain = R::one() + s.data()[ch];
                        let (mut sx, mut sb) = (0.0f64, 0.0f64);
                        for (d, &v) in dx.plane_mut(ch).iter_mut().zip(input.plane(ch)) {
                            sx += (*d * v).f64();
                            sb += d.f64();
                            *d *= gain;
                        }
                        ds[ch] = R::of(sx);
                        db[ch] = R::of(sb);
                    }
                    acc(&mut adj[x.0], dx);
                    acc(&mut adj[scale.0], ImageTensor::from_vec(c, 1, 1, ds)?);
                    acc(&mut adj[shift.0], ImageTensor::from_vec(c, 1, 1, db)?);
                }
            }
        }
        Ok(())
    }
}
