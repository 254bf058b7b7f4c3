use std::sync::Mutex;

use pyrdiff_core::diffusion::{
    ddim_step, ddim_timesteps, forward_marginal, posterior, reconstruct_x0, reverse_step, sample,
    Condition, DiffusionState,
};
use pyrdiff_core::{
    DenoiserInput, GaussianOracleDenoiser, ImageTensor, NoisePredictor, NoiseSchedule,
    PyramidSchedule, Result, SamplerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> ImageTensor<f64> {
    ImageTensor::filled(1, 1, 1, v)
}

/// Predicts zero noise and records every call.
#[derive(Default)]
struct Recorder {
    calls: Mutex<Vec<(usize, usize, usize)>>,
}

impl NoisePredictor<f64> for Recorder {
    fn predict_noise(&self, input: &DenoiserInput<f64>) -> Result<ImageTensor<f64>> {
        let (c, h, w) = input.x_t.shape();
        self.calls.lock().unwrap().push((input.t, h, w));
        Ok(ImageTensor::zeros(c, h, w))
    }
}

#[test]
fn ddim_with_full_stochasticity_matches_ancestral_step() {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::constant(2000);
    for t in [2, 17, 400, 1500, 2000] {
        let state = DiffusionState {
            t,
            x: scalar(0.37),
        };
        let y = scalar(-0.2);
        let a0 = reverse_step(&ns, &ps, &state, &y, &scalar(0.0)).unwrap();
        let a1 = reverse_step(&ns, &ps, &state, &y, &scalar(1.0)).unwrap();
        let d0 = ddim_step(&ns, &ps, &state, &y, &scalar(0.0), t - 1, 1.0).unwrap();
        let d1 = ddim_step(&ns, &ps, &state, &y, &scalar(1.0), t - 1, 1.0).unwrap();
        assert_eq!(d0.t, t - 1);
        assert!((a0.x.data()[0] - d0.x.data()[0]).abs() < 1e-10, "mean at t={t}");
        assert!((a1.x.data()[0] - d1.x.data()[0]).abs() < 1e-10, "spread at t={t}");
    }
}

#[test]
fn deterministic_ddim_keeps_the_implied_noise() {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::constant(2000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = ImageTensor::<f64>::randn(3, 4, 4, &mut rng);
    let eps = ImageTensor::<f64>::randn(3, 4, 4, &mut rng);
    let x = forward_marginal(&ns, &ps, &y, 1200, &eps).unwrap();
    let next = ddim_step(
        &ns,
        &ps,
        &DiffusionState { t: 1200, x },
        &y,
        &ImageTensor::zeros(3, 4, 4),
        700,
        0.0,
    )
    .unwrap();
    let expected = forward_marginal(&ns, &ps, &y, 700, &eps).unwrap();
    for (a, b) in next.x.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn reconstruction_inverts_the_marginal() {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::paper_default(2000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    for t in [1, 999, 1000, 1001, 2000] {
        let s = ps.factor(t);
        let eps = ImageTensor::<f64>::randn(3, 8 / s, 8 / s, &mut rng);
        let x_t = forward_marginal(&ns, &ps, &x0, t, &eps).unwrap();
        let back = reconstruct_x0(&ns, &x_t, &eps, t).unwrap();
        let want = pyrdiff_core::imageops::downsample(&x0, s).unwrap();
        for (a, b) in back.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-8, "t={t}");
        }
    }
}

#[test]
fn posterior_variance_is_positive_past_the_first_step() {
    let ns = NoiseSchedule::paper_default();
    for t in 2..=2000 {
        let p = posterior(&ns, t).unwrap();
        assert!(p.variance > 0.0 && p.variance < ns.beta(t), "t={t}");
    }
}

#[test]
fn ancestral_pass_changes_resolution_once_per_boundary() {
    let ns = NoiseSchedule::linear(40, 0.999, 0.95).unwrap();
    let ps = PyramidSchedule::from_bracket(40, "[1,2,4,8]").unwrap();
    let x_low = ImageTensor::<f64>::filled(3, 16, 16, -0.5);
    let cond = Condition::for_schedule(&x_low, &ps).unwrap();
    let rec = Recorder::default();
    sample(&ns, &ps, &SamplerConfig::default(), &rec, None, &cond).unwrap();
    let calls = rec.calls.into_inner().unwrap();
    assert_eq!(calls.len(), 40);
    let ts: Vec<usize> = calls.iter().map(|c| c.0).collect();
    assert_eq!(ts, (1..=40).rev().collect::<Vec<_>>());
    for &(t, h, w) in &calls {
        let s = ps.factor(t);
        assert_eq!((h, w), (16 / s, 16 / s), "t={t}");
    }
    let changes = calls.windows(2).filter(|p| p[0].1 != p[1].1).count();
    assert_eq!(changes, 3);
}

#[test]
fn ddim_pass_calls_the_denoiser_once_per_planned_step() {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::paper_default(2000);
    let x_low = ImageTensor::<f64>::filled(3, 8, 8, -0.5);
    let cond = Condition::for_schedule(&x_low, &ps).unwrap();
    let rec = Recorder::default();
    let cfg = SamplerConfig {
        ddim_steps: Some(4),
        ..SamplerConfig::default()
    };
    sample(&ns, &ps, &cfg, &rec, None, &cond).unwrap();
    let ts: Vec<usize> = rec.calls.into_inner().unwrap().iter().map(|c| c.0).collect();
    assert_eq!(ts, ddim_timesteps(&ps, 4).unwrap());
    assert_eq!(ts, vec![2000, 1001, 1000, 1]);
}

#[test]
fn delta_prior_oracle_samples_its_mean_exactly() {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::paper_default(2000);
    let oracle = GaussianOracleDenoiser::new(vec![0.3, -0.1, 0.6], vec![0.0; 3]).unwrap();
    let cond = Condition::for_schedule(&ImageTensor::<f64>::zeros(3, 4, 4), &ps).unwrap();
    for ddim in [None, Some(4), Some(10)] {
        let cfg = SamplerConfig {
            ddim_steps: ddim,
            seed: 5,
            ..SamplerConfig::default()
        };
        let out = sample(&ns, &ps, &cfg, &oracle, None, &cond).unwrap();
        for c in 0..3 {
            for v in out.plane(c) {
                assert!((v - oracle.mu()[c]).abs() < 1e-9, "{ddim:?} channel {c}");
            }
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let ns = NoiseSchedule::linear(50, 0.999, 0.95).unwrap();
    let ps = PyramidSchedule::from_bracket(50, "[1,1,2,2]").unwrap();
    let oracle = GaussianOracleDenoiser::uniform(3, 0.0, 0.5).unwrap();
    let cond = Condition::for_schedule(&ImageTensor::<f64>::zeros(3, 4, 4), &ps).unwrap();
    let run = |seed| {
        let cfg = SamplerConfig {
            seed,
            ..SamplerConfig::default()
        };
        sample(&ns, &ps, &cfg, &oracle, None, &cond).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn dump_dir_receives_every_state() {
    let ns = NoiseSchedule::linear(10, 0.999, 0.95).unwrap();
    let ps = PyramidSchedule::constant(10);
    let oracle = GaussianOracleDenoiser::uniform(3, 0.0, 0.5).unwrap();
    let cond = Condition::for_schedule(&ImageTensor::<f64>::zeros(3, 4, 4), &ps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SamplerConfig {
        dump_dir: Some(dir.path().to_path_buf()),
        ..SamplerConfig::default()
    };
    sample(&ns, &ps, &cfg, &oracle, None, &cond).unwrap();
    let count = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(count >= 10, "{count} dumps");
}
