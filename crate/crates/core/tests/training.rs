use pyrdiff_core::training::{
    draw_example, sample_rng, train, training_step, PairSampler, PairSource, TrainConfig,
    TrainState, CHECKPOINT_DIR, LOG_FILE,
};
use pyrdiff_core::checkpoint::Checkpoint;
use pyrdiff_core::denoiser::l1_loss;
use pyrdiff_core::{
    DenoiserConfig, GaussianOracleDenoiser, ImageTensor, NoisePredictor, NoiseSchedule,
    PyramidSchedule, DenoiserInput,
};

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        widths: [8, 8, 8],
        steps: 200,
    }
}

fn setup() -> (NoiseSchedule, PyramidSchedule, TrainConfig, PairSource) {
    let ns = NoiseSchedule::linear(200, 0.9999, 0.95).unwrap();
    let ps = PyramidSchedule::from_bracket(200, "[1,1,2,2]").unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        patch_height: 8,
        patch_width: 8,
        iterations: 10,
        learning_rate: 1e-3,
        milestones: vec![],
        seed: 3,
        ..TrainConfig::default()
    };
    (ns, ps, cfg, PairSource::Synthetic(PairSampler::default()))
}

#[test]
fn oracle_prediction_beats_predicting_zero() {
    // noise-free constant targets make the oracle exact, so the L1 loss of
    // the zero predictor is what the training objective starts from
    let (ns, ps, cfg, _) = setup();
    let img = ImageTensor::filled(3, 8, 8, 0.25f32);
    let source = PairSource::Images(vec![(img.clone(), img)]);
    let oracle = GaussianOracleDenoiser::uniform(3, 0.25, 0.0).unwrap();
    let (mut oracle_loss, mut zero_loss) = (0.0, 0.0);
    for i in 0..50 {
        let mut rng = sample_rng(1, i, 0);
        let ex = draw_example(&ns, &ps, &source, &cfg, &mut rng).unwrap();
        let x64 = ex.x_t.cast::<f64>();
        let cond = pyrdiff_core::diffusion::Condition::build(&ex.cond.x_low.cast::<f64>(), &[1])
            .unwrap();
        let pred = oracle
            .predict_noise(&DenoiserInput {
                x_t: &x64,
                cond: cond.base(),
                t: ex.t,
                alpha_bar: ns.alpha_bar(ex.t),
                swap_condition: false,
            })
            .unwrap();
        oracle_loss += l1_loss(&pred, &ex.eps.cast()).unwrap().0;
        zero_loss += l1_loss(&ex.eps.map(|_| 0.0), &ex.eps).unwrap().0;
    }
    assert!(oracle_loss < 1e-6 * zero_loss.max(1.0), "{oracle_loss} vs {zero_loss}");
}

#[test]
fn gating_follows_the_amplification_factor() {
    let (ns, ps, cfg, source) = setup();
    let mut state = TrainState::new(tiny(), &cfg).unwrap();
    for _ in 0..20 {
        let report = training_step(&mut state, &ns, &ps, &cfg, &source).unwrap();
        for (&t, &g) in report.timesteps.iter().zip(&report.gated) {
            assert_eq!(g, ns.amplification_factor(t).unwrap() > cfg.gamma, "t={t}");
        }
        assert_eq!(report.corrector_updated, report.gated.iter().any(|&g| g));
        assert_eq!(report.corrector_loss.is_some(), report.corrector_updated);
    }
}

#[test]
fn corrector_training_does_not_touch_the_denoiser() {
    let (ns, ps, cfg, source) = setup();
    let off = TrainConfig {
        train_corrector: false,
        ..cfg.clone()
    };
    let mut with = TrainState::new(tiny(), &cfg).unwrap();
    let mut without = TrainState::new(tiny(), &off).unwrap();
    let mut any_gated = false;
    for _ in 0..10 {
        let r = training_step(&mut with, &ns, &ps, &cfg, &source).unwrap();
        any_gated |= r.corrector_updated;
        let r = training_step(&mut without, &ns, &ps, &off, &source).unwrap();
        assert!(!r.corrector_updated);
    }
    assert!(any_gated);
    assert_eq!(with.denoiser.params(), without.denoiser.params());
    assert_ne!(with.corrector.params(), without.corrector.params());
}

#[test]
fn training_reduces_the_denoiser_loss() {
    let (ns, ps, cfg, source) = setup();
    let mut state = TrainState::new(tiny(), &cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..500 {
        let r = training_step(&mut state, &ns, &ps, &cfg, &source).unwrap();
        assert!(r.denoiser_loss.is_finite());
        losses.push(r.denoiser_loss);
    }
    let moving = |end: usize| losses[end - 100..end].iter().sum::<f64>() / 100.0;
    let (early, late) = (moving(100), moving(500));
    assert!(late < early, "100-step average loss {early:.3} -> {late:.3}");
}

#[test]
fn steps_are_reproducible() {
    let (ns, ps, cfg, source) = setup();
    let mut a = TrainState::new(tiny(), &cfg).unwrap();
    let mut b = TrainState::new(tiny(), &cfg).unwrap();
    for _ in 0..5 {
        let ra = training_step(&mut a, &ns, &ps, &cfg, &source).unwrap();
        let rb = training_step(&mut b, &ns, &ps, &cfg, &source).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a.denoiser.params(), b.denoiser.params());
    assert_eq!(a.corrector.params(), b.corrector.params());
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let (ns, ps, cfg, source) = setup();
    let meta = serde_json::json!({});
    let straight = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(tiny(), &cfg).unwrap();
    train(&mut state, &ns, &ps, &cfg, &source, straight.path(), &meta, |_| {}).unwrap();

    let split = tempfile::tempdir().unwrap();
    let half = TrainConfig {
        iterations: 6,
        ..cfg.clone()
    };
    let mut first = TrainState::new(tiny(), &half).unwrap();
    train(&mut first, &ns, &ps, &half, &source, split.path(), &meta, |_| {}).unwrap();
    let ck = Checkpoint::load(split.path().join(CHECKPOINT_DIR)).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ck, &cfg.adam).unwrap();
    assert_eq!(resumed.iteration, 6);
    train(&mut resumed, &ns, &ps, &cfg, &source, split.path(), &meta, |_| {}).unwrap();

    assert_eq!(state.denoiser.params(), resumed.denoiser.params());
    assert_eq!(state.corrector.params(), resumed.corrector.params());
    let log = |d: &std::path::Path| std::fs::read_to_string(d.join(LOG_FILE)).unwrap();
    assert_eq!(log(straight.path()), log(split.path()));
}
