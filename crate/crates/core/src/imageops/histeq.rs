use crate::imageops::ImageTensor;
use crate::real::Real;

pub const LEVELS: usize = 256;

/// Per-channel histogram equalisation with 256 bins.
///
/// Input and output are in the internal `[-1, 1]` range. Each channel is
/// mapped to `[0, 1]`, quantised to `round(v * 255)`, and remapped to
/// `cdf(level) / pixels`. A constant channel therefore maps to `1.0`.
pub fn histogram_equalize<R: Real>(img: &ImageTensor<R>) -> ImageTensor<R> {
    let unit = img.to_unit_range();
    let mut out = unit.clone();
    let n = img.pixels();
    for c in 0..img.channels() {
        let levels: Vec<usize> = unit
            .plane(c)
            .iter()
            .map(|v| (v.f64().clamp(0.0, 1.0) * (LEVELS - 1) as f64).round() as usize)
            .collect();
        let mut hist = [0usize; LEVELS];
        for &q in &levels {
            hist[q] += 1;
        }
        let mut cdf = [0usize; LEVELS];
        let mut acc = 0;
        for (slot, count) in cdf.iter_mut().zip(hist) {
            acc += count;
            *slot = acc;
        }
        for (dst, &q) in out.plane_mut(c).iter_mut().zip(&levels) {
            *dst = R::of(cdf[q] as f64 / n as f64);
        }
    }
    out.from_unit_range()
}
