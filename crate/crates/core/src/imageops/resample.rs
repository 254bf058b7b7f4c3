use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::real::Real;

fn check_factor(r: usize) -> Result<()> {
    if r == 0 || !r.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "scale factor {r} is not a power of two"
        )));
    }
    Ok(())
}

/// Area-average downsampling: each output pixel is the mean of its `r x r` block.
pub fn downsample<R: Real>(img: &ImageTensor<R>, r: usize) -> Result<ImageTensor<R>> {
    check_factor(r)?;
    if r == 1 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.shape();
    if h % r != 0 || w % r != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            factor: r,
        });
    }
    let (oh, ow) = (h / r, w / r);
    let inv = 1.0 / (r * r) as f64;
    let mut out = ImageTensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..r {
                    let row = &src[(oy * r + dy) * w + ox * r..][..r];
                    acc += row.iter().map(|v| v.f64()).sum::<f64>();
                }
                dst[oy * ow + ox] = R::of(acc * inv);
            }
        }
    }
    Ok(out)
}

/// Source index pair and weight of the upper neighbour for output sample `k`.
///
/// Sample centres are half-pixel aligned so that an upsampled block shares its
/// centre with the coarse pixel it came from; the outermost half pixels are
/// linearly extrapolated from the two nearest samples.
fn taps(n: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..n * r)
        .map(|k| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let src = (k as f64 + 0.5) / r as f64 - 0.5;
            let i0 = (src.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by `r` in both directions.
pub fn upsample<R: Real>(img: &ImageTensor<R>, r: usize) -> Result<ImageTensor<R>> {
    check_factor(r)?;
    if r == 1 {
        return Ok(img.clone());
    }
    let (c, h, w) = img.shape();
    let (oh, ow) = (
        h.checked_mul(r)
            .ok_or_else(|| Error::InvalidArgument("upsampled size overflows".into()))?,
        w.checked_mul(r)
            .ok_or_else(|| Error::InvalidArgument("upsampled size overflows".into()))?,
    );
    let tx = taps(w, r);
    let ty = taps(h, r);
    let mut out = ImageTensor::zeros(c, oh, ow);
    let mut rows = vec![0.0f64; h * ow];
    for ch in 0..c {
        let src = img.plane(ch);
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (x, &(a, b, f)) in tx.iter().enumerate() {
                rows[y * ow + x] = s[a].f64() * (1.0 - f) + s[b].f64() * f;
            }
        }
        let dst = out.plane_mut(ch);
        for (y, &(a, b, f)) in ty.iter().enumerate() {
            for x in 0..ow {
                dst[y * ow + x] = R::of(rows[a * ow + x] * (1.0 - f) + rows[b * ow + x] * f);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn downsample_constant_and_block_mean() {
        let img = ImageTensor::<f32>::filled(3, 8, 8, 0.3);
        for r in [1, 2, 4, 8] {
            let d = downsample(&img, r).unwrap();
            assert!(d.data().iter().all(|&v| v == 0.3));
        }
        let img = ImageTensor::<f64>::from_vec(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&img, 2).unwrap().data(), &[0.5]);
    }

    #[test]
    fn downsample_composes_exactly_on_dyadic_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageTensor::<f32>::from_fn(2, 8, 8, |_, _, _| {
            rng.random_range(-256i32..=256) as f32 / 256.0
        });
        let direct = downsample(&img, 4).unwrap();
        let twice = downsample(&downsample(&img, 2).unwrap(), 2).unwrap();
        assert_eq!(direct, twice);
    }

    #[test]
    fn downsample_rejects_bad_factors() {
        let img = ImageTensor::<f32>::zeros(1, 6, 8);
        assert!(downsample(&img, 4).is_err());
        assert!(downsample(&img, 3).is_err());
        assert!(upsample(&img, 3).is_err());
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageTensor::<f32>::randn(3, 5, 7, &mut rng);
        assert_eq!(upsample(&img, 1).unwrap(), img);
        let c = ImageTensor::<f32>::filled(2, 3, 4, -0.7);
        let u = upsample(&c, 4).unwrap();
        assert_eq!(u.shape(), (2, 12, 16));
        assert!(u.data().iter().all(|&v| (v + 0.7).abs() < 1e-6));
    }

    #[test]
    fn upsampled_ramp_stays_linear() {
        let img = ImageTensor::<f64>::from_fn(1, 4, 6, |_, _, x| 0.1 * x as f64 - 0.2);
        let u = upsample(&img, 2).unwrap();
        for y in 0..8 {
            for x in 1..11 {
                let d1 = u.get(0, y, x + 1) - u.get(0, y, x);
                assert!((d1 - 0.05).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsample_inverts_upsample_on_linear_images() {
        let img = ImageTensor::<f64>::from_fn(2, 4, 6, |c, y, x| {
            0.1 * x as f64 - 0.05 * y as f64 + c as f64 * 0.2
        });
        for r in [2, 4] {
            let back = downsample(&upsample(&img, r).unwrap(), r).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
