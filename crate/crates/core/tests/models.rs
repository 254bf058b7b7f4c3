use pyrdiff_core::diffusion::Condition;
use pyrdiff_core::{
    ConditionLevel, ConvDenoiser, DenoiserConfig, DenoiserInput, GaussianOracleDenoiser,
    GlobalCorrector, ImageTensor, NoisePredictor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> DenoiserConfig {
    DenoiserConfig {
        widths: [8, 12, 16],
        steps: 100,
    }
}

#[test]
fn oracle_noise_is_the_conditional_expectation() {
    // E[eps | x_t] is linear in x_t, so compare the regression slope and
    // intercept of eps on x_t with the oracle's
    let (mu, sigma0, ab) = (0.3, 0.4, 0.35f64);
    let oracle = GaussianOracleDenoiser::uniform(1, mu, sigma0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400_000;
    let (mut sx, mut se, mut sxx, mut sxe) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let x0 = mu + sigma0 * ImageTensor::<f64>::randn(1, 1, 1, &mut rng).data()[0];
        let eps = ImageTensor::<f64>::randn(1, 1, 1, &mut rng).data()[0];
        let x = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
        sx += x;
        se += eps;
        sxx += x * x;
        sxe += x * eps;
    }
    let nf = n as f64;
    let slope = (sxe / nf - sx * se / nf / nf) / (sxx / nf - (sx / nf).powi(2));
    let at = |x| oracle.optimal_noise(0, x, ab);
    let oracle_slope = at(1.0) - at(0.0);
    assert!((slope - oracle_slope).abs() / oracle_slope.abs() < 0.02);
    let x_mean = ab.sqrt() * mu;
    let mc_at_mean = se / nf + slope * (x_mean - sx / nf);
    assert!(mc_at_mean.abs() < 0.02 && at(x_mean).abs() < 1e-12);
}

#[test]
fn oracle_beats_a_misinformed_oracle() {
    let (mu, sigma0, ab) = (0.3, 0.2, 0.5f64);
    let right = GaussianOracleDenoiser::uniform(1, mu, sigma0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut samples = Vec::new();
    for _ in 0..50_000 {
        let x0 = mu + sigma0 * ImageTensor::<f64>::randn(1, 1, 1, &mut rng).data()[0];
        let eps = ImageTensor::<f64>::randn(1, 1, 1, &mut rng).data()[0];
        samples.push((ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps, eps));
    }
    let mse = |o: &GaussianOracleDenoiser| {
        samples
            .iter()
            .map(|&(x, e)| (o.optimal_noise(0, x, ab) - e).powi(2))
            .sum::<f64>()
            / samples.len() as f64
    };
    let best = mse(&right);
    for scale in [0.9, 1.1] {
        let wrong = GaussianOracleDenoiser::uniform(1, mu * scale, sigma0).unwrap();
        assert!(best < mse(&wrong));
    }
}

#[test]
fn oracle_implements_the_predictor_trait_per_channel() {
    let oracle = GaussianOracleDenoiser::new(vec![0.1, 0.2, 0.3], vec![0.5, 0.5, 0.0]).unwrap();
    let x_low = ImageTensor::<f64>::zeros(3, 4, 4);
    let cond = Condition::build(&x_low, &[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x_t = ImageTensor::<f64>::randn(3, 4, 4, &mut rng);
    let out = oracle
        .predict_noise(&DenoiserInput {
            x_t: &x_t,
            cond: cond.base(),
            t: 10,
            alpha_bar: 0.6,
            swap_condition: false,
        })
        .unwrap();
    for c in 0..3 {
        for (o, x) in out.plane(c).iter().zip(x_t.plane(c)) {
            assert!((o - oracle.optimal_noise(c, *x, 0.6)).abs() < 1e-12);
        }
    }
}

fn shifted_level(level: &ConditionLevel<f64>, left: usize, width: usize) -> ConditionLevel<f64> {
    let crop = |img: &ImageTensor<f64>| img.crop(0, left, img.height(), width).unwrap();
    ConditionLevel {
        factor: level.factor,
        x_low: crop(&level.x_low),
        hiseq: crop(&level.hiseq),
        pos: crop(&level.pos),
    }
}

#[test]
fn denoiser_is_translation_equivariant_in_the_interior() {
    let net = ConvDenoiser::<f64>::new(small(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, width) = (8, 132, 128);
    let x_low = ImageTensor::<f64>::randn(3, h, w, &mut rng).map(|v| v.tanh());
    let cond = Condition::build(&x_low, &[1]).unwrap();
    let x_t = ImageTensor::<f64>::randn(3, h, w, &mut rng);
    let run = |left| {
        let level = shifted_level(cond.base(), left, width);
        let x = x_t.crop(0, left, h, width).unwrap();
        net.forward(&DenoiserInput {
            x_t: &x,
            cond: &level,
            t: 50,
            alpha_bar: 0.5,
            swap_condition: false,
        })
        .unwrap()
        .0
    };
    let (a, b) = (run(0), run(4));
    for c in 0..3 {
        for y in 0..h {
            for x in 48..80 {
                assert!((a.get(c, y, x + 4) - b.get(c, y, x)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn denoiser_gradients_are_linear_in_the_output_gradient() {
    let net = ConvDenoiser::<f64>::new(small(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x_low = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let cond = Condition::build(&x_low, &[1]).unwrap();
    let x_t = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let (_, cache) = net
        .forward(&DenoiserInput {
            x_t: &x_t,
            cond: cond.base(),
            t: 3,
            alpha_bar: 0.9,
            swap_condition: true,
        })
        .unwrap();
    let zero = net.backward(&cache, &ImageTensor::zeros(3, 8, 8)).unwrap();
    assert!(zero.is_zero());
    let g = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let one = net.backward(&cache, &g).unwrap();
    let two = net.backward(&cache, &g.scale(2.0)).unwrap();
    assert!(!one.is_zero());
    for (a, b) in one.grads.iter().flatten().zip(two.grads.iter().flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn stale_cache_is_rejected() {
    let mut net = ConvDenoiser::<f64>::new(small(), 9).unwrap();
    let cond = Condition::build(&ImageTensor::<f64>::zeros(3, 4, 4), &[1]).unwrap();
    let x_t = ImageTensor::<f64>::zeros(3, 4, 4);
    let (_, cache) = net
        .forward(&DenoiserInput {
            x_t: &x_t,
            cond: cond.base(),
            t: 1,
            alpha_bar: 0.9,
            swap_condition: false,
        })
        .unwrap();
    net.params_mut().tensors_mut().next().unwrap().data[0] += 1.0;
    assert!(net.backward(&cache, &ImageTensor::zeros(3, 4, 4)).is_err());
}

#[test]
fn corrector_base_path_is_pixelwise() {
    let mut gc = GlobalCorrector::<f64>::new(10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for p in gc.params_mut().tensors_mut() {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let y = ImageTensor::<f64>::randn(3, 6, 6, &mut rng);
    let vector = ImageTensor::<f64>::randn(32, 1, 1, &mut rng);
    let mut perm: Vec<usize> = (0..36).collect();
    for i in (1..36).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let a = gc
        .correct_with_vector(&y.permute_pixels(&perm).unwrap(), &vector)
        .unwrap();
    let b = gc.correct_with_vector(&y, &vector).unwrap().permute_pixels(&perm).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn fresh_corrector_passes_gradient_only_to_its_output_layer() {
    let gc = GlobalCorrector::<f64>::new(11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let cond = Condition::build(&ImageTensor::<f64>::randn(3, 8, 8, &mut rng), &[1]).unwrap();
    let (out, cache) = gc.forward(&y, cond.base()).unwrap();
    assert_eq!(out, y);
    let grads = gc
        .backward(&cache, &ImageTensor::<f64>::randn(3, 8, 8, &mut rng))
        .unwrap();
    for (p, g) in gc.params().iter().zip(&grads.grads) {
        let nonzero = g.iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, p.name.starts_with("base3"), "{}", p.name);
    }
}
