use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;

/// Channel-major image: `data[c * height * width + y * width + x]`.
///
/// Images live in `[-1, 1]` internally; 8-bit files are mapped onto that
/// range by [`crate::imageops::load_png`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<R: Real = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<R>,
}

impl<R: Real> ImageTensor<R> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, R::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: R) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                channels * height * width,
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> R,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Standard normal noise.
    pub fn randn(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let data = (0..channels * height * width)
            .map(|_| R::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> R {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: R) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[R] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [R] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: R, other: &Self, b: R) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: R) -> Self {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: R, hi: R) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Mean of one channel, accumulated in double precision.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.plane(c);
        p.iter().map(|v| v.f64()).sum::<f64>() / p.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<S: Real>(&self) -> ImageTensor<S> {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    /// Stacks channel planes of images that share a spatial size.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::shape((h, w), (p.height, p.width)));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Self {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Channels `range` as a new image.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Self {
        let n = self.pixels();
        Self {
            channels: range.len(),
            height: self.height,
            width: self.width,
            data: self.data[range.start * n..range.end * n].to_vec(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                (self.height, self.width),
                (top + height, left + width),
            ));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Pads bottom/right by mirror reflection (edge pixel not repeated).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Self> {
        if (bottom > 0 && bottom >= self.height.max(2)) || (right > 0 && right >= self.width.max(2))
        {
            return Err(Error::InvalidArgument(format!(
                "reflect padding ({bottom}, {right}) too large for {}x{}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Ok(Self::from_fn(
            self.channels,
            self.height + bottom,
            self.width + right,
            |c, y, x| self.get(c, reflect(y, self.height), reflect(x, self.width)),
        ))
    }

    /// Spatial permutation `dst[i] = src[perm[i]]` applied to every channel.
    pub fn permute_pixels(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.pixels() {
            return Err(Error::shape(self.pixels(), perm.len()));
        }
        let mut out = self.clone();
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for (d, &p) in dst.iter_mut().zip(perm) {
                *d = src[p];
            }
        }
        Ok(out)
    }

    /// `[-1, 1]` to `[0, 1]`.
    pub fn to_unit_range(&self) -> Self {
        let half = R::of(0.5);
        self.map(|v| (v + R::one()) * half)
    }

    /// `[0, 1]` to `[-1, 1]`.
    pub fn from_unit_range(&self) -> Self {
        let two = R::of(2.0);
        self.map(|v| v * two - R::one())
    }
}
