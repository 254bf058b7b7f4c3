use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;
use crate::real::Real;

/// Sinusoidal coordinate channels `[sin X, cos X, sin Y, cos Y]` for a base
/// image of `base_height x base_width` seen at downsampling factor `r`.
///
/// `X` follows rows and `Y` columns. Coordinates are taken in the base frame:
/// coarse pixel `i` sits at base pixel `i * r`, whose centre `i * r + 0.5` is
/// normalised by the base size onto `[0, 2pi]`. A coarser level therefore
/// samples the same field on a sparser grid.
pub fn position_encoding<R: Real>(
    base_height: usize,
    base_width: usize,
    r: usize,
) -> Result<ImageTensor<R>> {
    if r == 0 || base_height % r != 0 || base_width % r != 0 {
        return Err(Error::NotDivisible {
            height: base_height,
            width: base_width,
            factor: r,
        });
    }
    let (h, w) = (base_height / r, base_width / r);
    let xs: Vec<f64> = (0..h)
        .map(|i| TAU * ((i * r) as f64 + 0.5) / base_height as f64)
        .collect();
    let ys: Vec<f64> = (0..w)
        .map(|j| TAU * ((j * r) as f64 + 0.5) / base_width as f64)
        .collect();
    Ok(ImageTensor::from_fn(4, h, w, |c, i, j| {
        R::of(match c {
            0 => xs[i].sin(),
            1 => xs[i].cos(),
            2 => ys[j].sin(),
            _ => ys[j].cos(),
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pixel_and_pythagorean_identity() {
        let pe = position_encoding::<f64>(8, 12, 1).unwrap();
        assert!((pe.get(0, 0, 0) - (TAU * 0.5 / 8.0).sin()).abs() < 1e-15);
        assert!((pe.get(2, 0, 0) - (TAU * 0.5 / 12.0).sin()).abs() < 1e-15);
        for y in 0..8 {
            for x in 0..12 {
                let a = pe.get(0, y, x).powi(2) + pe.get(1, y, x).powi(2);
                let b = pe.get(2, y, x).powi(2) + pe.get(3, y, x).powi(2);
                assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
            }
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn coarse_grid_is_strided_fine_grid() {
        let fine = position_encoding::<f32>(16, 24, 1).unwrap();
        for r in [2, 4, 8] {
            let coarse = position_encoding::<f32>(16, 24, r).unwrap();
            assert_eq!(coarse.shape(), (4, 16 / r, 24 / r));
            for c in 0..4 {
                for y in 0..16 / r {
                    for x in 0..24 / r {
                        assert_eq!(coarse.get(c, y, x), fine.get(c, y * r, x * r));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_non_divisible() {
        assert!(position_encoding::<f32>(10, 12, 4).is_err());
    }
}
