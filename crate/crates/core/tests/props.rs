use proptest::prelude::*;
use pyrdiff_core::diffusion::ddim_timesteps;
use pyrdiff_core::imageops::{downsample, psnr, ssim, upsample};
use pyrdiff_core::{ImageTensor, PyramidSchedule};

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, c * h * w)
        .prop_map(move |v| ImageTensor::from_vec(c, h, w, v).unwrap())
}

fn schedule() -> impl Strategy<Value = PyramidSchedule> {
    (prop::collection::vec(0u32..2, 1..5), 4usize..60).prop_map(|(steps_up, per)| {
        let mut factor = 1;
        let mut factors = Vec::new();
        for (i, up) in steps_up.into_iter().enumerate() {
            if i > 0 {
                factor <<= up;
            }
            factors.extend(std::iter::repeat(factor).take(per));
        }
        PyramidSchedule::from_factors(factors).unwrap()
    })
}

proptest! {
    #[test]
    fn downsampling_preserves_the_mean(img in image(3, 8, 8), r in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let down = downsample(&img, r).unwrap();
        prop_assert_eq!(down.shape(), (3, 8 / r, 8 / r));
        for c in 0..3 {
            prop_assert!((down.channel_mean(c) - img.channel_mean(c)).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampling_keeps_constants(v in -1.0f64..1.0, r in prop::sample::select(vec![2usize, 4])) {
        let up = upsample(&ImageTensor::filled(2, 3, 5, v), r).unwrap();
        prop_assert_eq!(up.shape(), (2, 3 * r, 5 * r));
        prop_assert!(up.data().iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn reflect_padding_crops_back(img in image(3, 5, 7), b in 0usize..5, r in 0usize..7) {
        let padded = img.pad_reflect(b, r).unwrap();
        prop_assert_eq!(padded.shape(), (3, 5 + b, 7 + r));
        prop_assert_eq!(padded.crop(0, 0, 5, 7).unwrap(), img);
    }

    #[test]
    fn metrics_are_symmetric(a in image(3, 12, 12), b in image(3, 12, 12)) {
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn levels_tile_the_schedule(ps in schedule()) {
        let levels = ps.levels();
        prop_assert_eq!(levels[0].first, 1);
        prop_assert_eq!(levels.last().unwrap().last, ps.steps());
        for pair in levels.windows(2) {
            prop_assert_eq!(pair[0].last + 1, pair[1].first);
            prop_assert!(pair[0].factor < pair[1].factor);
        }
        for t in 2..=ps.steps() {
            prop_assert!(ps.factor(t - 1) <= ps.factor(t));
            prop_assert!(ps.factor(t).is_power_of_two());
        }
    }

    #[test]
    fn ddim_plans_are_valid(ps in schedule(), extra in 0usize..200) {
        let levels = ps.levels();
        let required: usize = levels.iter().map(|l| l.len().min(2)).sum();
        let n = (required + extra).min(ps.steps());
        let plan = ddim_timesteps(&ps, n).unwrap();
        prop_assert_eq!(plan.len(), n);
        prop_assert!(plan.windows(2).all(|p| p[0] > p[1]));
        for l in &levels {
            prop_assert!(plan.contains(&l.first) && plan.contains(&l.last));
        }
        if required > 1 {
            prop_assert!(ddim_timesteps(&ps, required - 1).is_err());
        }
    }
}
