//! Oracle checks run by `pyrdiff verify`, in either floating-point precision.

use std::fmt;

use pyrdiff_core::diffusion::{
    forward_marginal, forward_step, reconstruct_x0, reverse_step, Condition, DiffusionState,
};
use pyrdiff_core::nn::{ParamStore, Tape};
use pyrdiff_core::{
    ConvDenoiser, Corrector, DenoiserConfig, DenoiserInput, GlobalCorrector, ImageTensor,
    NoiseSchedule, PyramidSchedule, Real,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} [{}] {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.precision,
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub precisions: Vec<Precision>,
    pub seed: u64,
    /// Replace the posterior variance at this step with a wrong value.
    pub corrupt_beta_tilde: Option<usize>,
    /// Parameter entries sampled per tensor in the network gradient checks.
    pub entries_per_tensor: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            precisions: vec![Precision::F32, Precision::F64],
            seed: 0,
            corrupt_beta_tilde: None,
            entries_per_tensor: 3,
        }
    }
}

struct Tolerances {
    posterior: f64,
    amplification: f64,
    gradient: f64,
}

fn tolerances<R: Real>() -> Tolerances {
    if R::NAME == "f64" {
        Tolerances {
            posterior: 1e-10,
            amplification: 1e-6,
            gradient: 1e-4,
        }
    } else {
        Tolerances {
            posterior: 1e-5,
            amplification: 5e-4,
            gradient: 2e-2,
        }
    }
}

fn schedule(opts: &VerifyOptions) -> NoiseSchedule {
    let ns = NoiseSchedule::paper_default();
    match opts.corrupt_beta_tilde {
        Some(t) => {
            let wrong = ns.beta_tilde(t) * 1.5 + 1e-6;
            ns.with_corrupted_beta_tilde(t, wrong)
        }
        None => ns,
    }
}

pub fn run(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for &p in &opts.precisions {
        match p {
            Precision::F32 => run_precision::<f32>(p, opts, &mut report),
            Precision::F64 => run_precision::<f64>(p, opts, &mut report),
        }
    }
    report
}

fn run_precision<R: Real>(p: Precision, opts: &VerifyOptions, report: &mut VerifyReport) {
    let mut push = |name: &str, result: pyrdiff_core::Result<(bool, String)>| {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        report.checks.push(CheckResult {
            name: name.into(),
            precision: p,
            passed,
            detail,
        });
    };
    push("marginal composition", marginal_composition::<R>(opts.seed));
    push("posterior against Bayes", posterior_bayes::<R>(opts));
    push("error amplification", amplification::<R>(opts.seed));
    push("layer gradients", layer_gradients::<R>(opts.seed));
    push("denoiser gradients", denoiser_gradients::<R>(opts));
    push("corrector gradients", corrector_gradients::<R>(opts));
    push("corrector identity at init", corrector_identity::<R>(opts.seed));
}

fn scalar<R: Real>(v: f64) -> ImageTensor<R> {
    ImageTensor::filled(1, 1, 1, R::of(v))
}

/// Ten single forward steps against the closed-form marginal, 10^5 chains.
fn marginal_composition<R: Real>(seed: u64) -> pyrdiff_core::Result<(bool, String)> {
    let ns = NoiseSchedule::linear(10, 0.99, 0.9)?;
    let ps = PyramidSchedule::constant(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = 0.7;
    let n = 100_000;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = scalar::<R>(x0);
        for t in 1..=10 {
            let eps = ImageTensor::randn(1, 1, 1, &mut rng);
            x = forward_step(&ns, &ps, &x, t, &eps)?;
        }
        let v = x.data()[0].f64();
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n as f64;
    let var = sum2 / n as f64 - mean * mean;
    let ab = ns.alpha_bar(10);
    let (want_mean, want_var) = (ab.sqrt() * x0, 1.0 - ab);
    let (em, ev) = (
        (mean - want_mean).abs() / want_mean,
        (var - want_var).abs() / want_var,
    );
    Ok((
        em <= 0.01 && ev <= 0.02,
        format!("mean {mean:.5} vs {want_mean:.5} ({em:.2e}), var {var:.5} vs {want_var:.5} ({ev:.2e})"),
    ))
}

/// Same-resolution reverse step against the product of the two Gaussian
/// factors `q(x_t | x_{t-1}) q(x_{t-1} | x_0)`, for every step `t >= 2`.
fn posterior_bayes<R: Real>(opts: &VerifyOptions) -> pyrdiff_core::Result<(bool, String)> {
    let ns = schedule(opts);
    let ps = PyramidSchedule::constant(ns.steps());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tol = tolerances::<R>().posterior;
    let mut worst = (0.0f64, 0usize);
    for t in 2..=ns.steps() {
        let x_t: f64 = rng.random_range(-2.0..2.0);
        let x0: f64 = rng.random_range(-1.0..1.0);
        let (a, ab_prev) = (ns.alpha(t), ns.alpha_bar(t - 1));
        let precision = a / (1.0 - a) + 1.0 / (1.0 - ab_prev);
        let want_var = 1.0 / precision;
        let want_mean = want_var * (a.sqrt() * x_t / (1.0 - a) + ab_prev.sqrt() * x0 / (1.0 - ab_prev));
        let state = DiffusionState {
            t,
            x: scalar::<R>(x_t),
        };
        let y = scalar::<R>(x0);
        let m = reverse_step(&ns, &ps, &state, &y, &scalar(0.0))?.x.data()[0].f64();
        let m1 = reverse_step(&ns, &ps, &state, &y, &scalar(1.0))?.x.data()[0].f64();
        let var = (m1 - m) * (m1 - m);
        let err = (m - want_mean).abs().max((var - want_var).abs());
        if err > worst.0 {
            worst = (err, t);
        }
    }
    Ok((
        worst.0 <= tol,
        format!("max error {:.2e} at t = {} (tolerance {tol:.0e})", worst.0, worst.1),
    ))
}

/// Reconstruction error equals the amplification factor times the noise
/// error, including at t = T.
fn amplification<R: Real>(seed: u64) -> pyrdiff_core::Result<(bool, String)> {
    let ns = NoiseSchedule::paper_default();
    let ps = PyramidSchedule::paper_default(ns.steps());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = tolerances::<R>().amplification;
    let mut worst = 0.0f64;
    for case in 0..50 {
        let t = if case == 0 { ns.steps() } else { rng.random_range(1..=ns.steps()) };
        let s = ps.factor(t);
        let x0 = ImageTensor::<R>::randn(3, 8, 8, &mut rng).map(|v| v.tanh());
        let (h, w) = (8 / s, 8 / s);
        let eps = ImageTensor::<R>::randn(3, h, w, &mut rng);
        let delta = ImageTensor::<R>::randn(3, h, w, &mut rng).scale(R::of(0.1));
        let x_t = forward_marginal(&ns, &ps, &x0, t, &eps)?;
        let wrong = eps.lincomb(R::one(), &delta, -R::one())?;
        let y = reconstruct_x0(&ns, &x_t, &wrong, t)?;
        let target = pyrdiff_core::imageops::downsample(&x0, s)?;
        let k = ns.amplification_factor(t)?;
        for ((yv, tv), dv) in y.data().iter().zip(target.data()).zip(delta.data()) {
            worst = worst.max(((yv.f64() - tv.f64()) - k * dv.f64()).abs());
        }
    }
    Ok((
        worst <= tol,
        format!(
            "max deviation {worst:.2e} (tolerance {tol:.0e}; factor at T = {:.1})",
            ns.amplification_factor(ns.steps())?
        ),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` (evaluated in double precision) against
/// `analytic` for the listed parameter entries.
fn compare_entries(
    store: &mut ParamStore<f64>,
    entries: &[(usize, usize)],
    analytic: &dyn Fn(usize, usize) -> f64,
    f: &mut dyn FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let h = 1e-3;
    let mut worst = 0.0f64;
    for &(tensor, index) in entries {
        let id = pyrdiff_core::nn::ParamId(tensor);
        let orig = store.data(id)[index];
        store.data_mut(id)[index] = orig + h;
        let up = f(store);
        store.data_mut(id)[index] = orig - h;
        let down = f(store);
        store.data_mut(id)[index] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(fd, analytic(tensor, index)));
    }
    worst
}

fn sample_entries(store: &ParamStore<f64>, per_tensor: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, p) in store.iter().enumerate() {
        for _ in 0..per_tensor.min(p.len()) {
            out.push((i, rng.random_range(0..p.len())));
        }
    }
    out
}

fn dot<R: Real>(a: &ImageTensor<R>, b: &ImageTensor<R>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x.f64() * y.f64()).sum()
}

struct LayerIds([pyrdiff_core::nn::ParamId; 10]);

/// Small graph touching every tape operation: padded, strided and pointwise
/// convolutions, activation, upsampling, concatenation, pooling, dense layers,
/// modulation and addition.
fn layer_graph<S: Real>(
    store: &ParamStore<S>,
    ids: &LayerIds,
    x: &ImageTensor<S>,
) -> pyrdiff_core::Result<(Tape<S>, pyrdiff_core::nn::Var)> {
    let [w3, b3, ws, bs, w1, b1, wl, bl, wm, bm] = ids.0;
    let mut tape = Tape::new(store);
    let xv = tape.leaf(x.clone());
    let a = tape.conv(store, xv, w3, b3, 1, 1)?;
    let a = tape.silu(a);
    let s = tape.conv(store, a, ws, bs, 2, 1)?;
    let up = tape.up_nearest(s, 2);
    let pooled = tape.global_avg_pool(s);
    let scale = tape.linear(store, pooled, wl, bl)?;
    let shift = tape.linear(store, pooled, wm, bm)?;
    let both = tape.concat(&[up, xv])?;
    let p = tape.conv(store, both, w1, b1, 1, 0)?;
    let m = tape.modulate(p, scale, shift)?;
    let out = tape.add(m, a)?;
    Ok((tape, out))
}

fn layer_gradients<R: Real>(seed: u64) -> pyrdiff_core::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids = LayerIds([
        store.add_uniform("w3", vec![4, 3, 3, 3], 27, &mut rng),
        store.add_uniform("b3", vec![4], 4, &mut rng),
        store.add_uniform("ws", vec![5, 4, 3, 3], 36, &mut rng),
        store.add_uniform("bs", vec![5], 5, &mut rng),
        store.add_uniform("w1", vec![4, 8, 1, 1], 8, &mut rng),
        store.add_uniform("b1", vec![4], 4, &mut rng),
        store.add_uniform("wl", vec![4, 5], 5, &mut rng),
        store.add_uniform("bl", vec![4], 4, &mut rng),
        store.add_uniform("wm", vec![4, 5], 5, &mut rng),
        store.add_uniform("bm", vec![4], 4, &mut rng),
    ]);
    let x = ImageTensor::<f64>::randn(3, 6, 8, &mut rng);
    let g = ImageTensor::<f64>::randn(4, 6, 8, &mut rng);
    let store_r: ParamStore<R> = store.cast();
    let (tape, out) = layer_graph(&store_r, &ids, &x.cast())?;
    let mut grads = store_r.zero_grads();
    tape.backward(&store_r, out, &g.cast(), &mut grads)?;
    let entries: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let mut f = |s: &ParamStore<f64>| {
        let (tape, out) = layer_graph(s, &ids, &x).expect("valid graph");
        dot(tape.value(out), &g)
    };
    let worst = compare_entries(&mut store, &entries, &|t, i| grads.grads[t][i].f64(), &mut f);
    let tol = tolerances::<R>().gradient;
    Ok((worst <= tol, format!("max relative error {worst:.2e} over {} entries", entries.len())))
}

fn test_condition(rng: &mut impl Rng, h: usize, w: usize) -> pyrdiff_core::Result<Condition<f64>> {
    let x_low = ImageTensor::<f64>::randn(3, h, w, rng).map(|v| 0.5 * v.tanh() - 0.4);
    Condition::build(&x_low, &[1])
}

fn denoiser_gradients<R: Real>(opts: &VerifyOptions) -> pyrdiff_core::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let net64 = ConvDenoiser::<f64>::new(DenoiserConfig::default(), opts.seed)?;
    let cond = test_condition(&mut rng, 8, 8)?;
    let x = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let g = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let (t, ab) = (700, 0.3);
    let net_r: ConvDenoiser<R> = net64.cast();
    let cond_r = Condition::<R>::build(&cond.base().x_low.cast(), &[1])?;
    let x_r = x.cast::<R>();
    let (_, cache) = net_r.forward(&DenoiserInput {
        x_t: &x_r,
        cond: cond_r.base(),
        t,
        alpha_bar: ab,
        swap_condition: true,
    })?;
    let grads = net_r.backward(&cache, &g.cast())?;
    let mut net = net64;
    let entries = sample_entries(net.params(), opts.entries_per_tensor, &mut rng);
    let mut store = net.params().clone();
    let worst = compare_entries(&mut store, &entries, &|ti, i| grads.grads[ti][i].f64(), &mut |s| {
        net.params_mut().load_from(s.params()).expect("same layout");
        let out = net
            .forward(&DenoiserInput {
                x_t: &x,
                cond: cond.base(),
                t,
                alpha_bar: ab,
                swap_condition: true,
            })
            .expect("valid input")
            .0;
        dot(&out, &g)
    });
    let tol = tolerances::<R>().gradient;
    Ok((worst <= tol, format!("max relative error {worst:.2e} over {} sampled entries", entries.len())))
}

fn corrector_gradients<R: Real>(opts: &VerifyOptions) -> pyrdiff_core::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut gc64 = GlobalCorrector::<f64>::new(opts.seed);
    // give the zero-initialised output layer non-zero weights so every path
    // carries gradient
    for p in gc64.params_mut().tensors_mut() {
        if p.name.starts_with("base3") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let cond = test_condition(&mut rng, 8, 8)?;
    let y = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let g = ImageTensor::<f64>::randn(3, 8, 8, &mut rng);
    let gc_r: GlobalCorrector<R> = gc64.cast();
    let cond_r = Condition::<R>::build(&cond.base().x_low.cast(), &[1])?;
    let (_, cache) = gc_r.forward(&y.cast(), cond_r.base())?;
    let grads = gc_r.backward(&cache, &g.cast())?;
    let entries = sample_entries(gc64.params(), opts.entries_per_tensor, &mut rng);
    let mut store = gc64.params().clone();
    let worst = compare_entries(&mut store, &entries, &|ti, i| grads.grads[ti][i].f64(), &mut |s| {
        gc64.params_mut().load_from(s.params()).expect("same layout");
        let out = gc64.forward(&y, cond.base()).expect("valid input").0;
        dot(&out, &g)
    });
    let tol = tolerances::<R>().gradient;
    Ok((worst <= tol, format!("max relative error {worst:.2e} over {} sampled entries", entries.len())))
}

fn corrector_identity<R: Real>(seed: u64) -> pyrdiff_core::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = GlobalCorrector::<R>::new(seed);
    let x_low = ImageTensor::<R>::randn(3, 16, 24, &mut rng).map(|v| v.tanh());
    let cond = Condition::build(&x_low, &[1])?;
    let y = ImageTensor::<R>::randn(3, 16, 24, &mut rng);
    let out = gc.correct(&y, cond.base())?;
    let worst = out
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.f64() - b.f64()).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-6, format!("max |correct(y) - y| = {worst:.2e}")))
}
