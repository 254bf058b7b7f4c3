use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB on `[0, 1]`-mapped images.
/// Identical images give `f64::INFINITY`.
pub fn psnr<R: Real>(a: &ImageTensor<R>, b: &ImageTensor<R>) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x.f64() - y.f64()) * 0.5;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1 on `[0, 1]`-mapped images, averaged over
/// channels. Only windows that fit entirely inside the image are scored.
pub fn ssim<R: Real>(a: &ImageTensor<R>, b: &ImageTensor<R>) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.plane(ch).iter().map(|v| (v.f64() + 1.0) * 0.5).collect();
        let y: Vec<f64> = b.plane(ch).iter().map(|v| (v.f64() + 1.0) * 0.5).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ImageTensor::<f64>::randn(3, 16, 16, &mut rng).clamp(-1.0, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = ImageTensor::<f64>::filled(3, 4, 4, -0.5);
        // +0.2 in [-1, 1] is +0.1 in [0, 1]: MSE 0.01
        let b = a.map(|v| v + 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    /// Direct per-window evaluation with a 2-D weight table.
    fn ssim_brute(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> f64 {
        let g = gaussian_window(11, 1.5);
        let (c, h, w) = a.shape();
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0;
            for top in 0..=h - 11 {
                for left in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            mx += wt * (a.get(ch, top + i, left + j) + 1.0) / 2.0;
                            my += wt * (b.get(ch, top + i, left + j) + 1.0) / 2.0;
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = g[i] * g[j];
                            let dx = (a.get(ch, top + i, left + j) + 1.0) / 2.0 - mx;
                            let dy = (b.get(ch, top + i, left + j) + 1.0) / 2.0 - my;
                            vx += wt * dx * dx;
                            vy += wt * dy * dy;
                            cov += wt * dx * dy;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / c as f64
    }

    #[test]
    fn ssim_matches_brute_force_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = ImageTensor::<f64>::randn(3, 16, 16, &mut rng).scale(0.4);
        let noise = ImageTensor::<f64>::randn(3, 16, 16, &mut rng).scale(0.2);
        let b = a.lincomb(1.0, &noise, 1.0).unwrap();
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_brute(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        assert!((-1.0..=1.0).contains(&fast));
    }

    #[test]
    fn ssim_needs_full_window() {
        let a = ImageTensor::<f32>::zeros(3, 8, 16);
        assert!(ssim(&a, &a).is_err());
        assert!(psnr(&a, &ImageTensor::zeros(3, 8, 15)).is_err());
    }
}
