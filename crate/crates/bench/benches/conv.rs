use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pyrdiff_bench::{condition, models, noisy, schedules};
use pyrdiff_core::DenoiserInput;

fn denoiser(c: &mut Criterion) {
    let (net, _) = models(2000);
    let (_, ps) = schedules(2000, "[1,1,1,1]");
    let mut group = c.benchmark_group("denoiser");
    for (h, w) in [(32, 48), (64, 96)] {
        let cond = condition(h, w, &ps);
        let x_t = noisy(h, w);
        let input = DenoiserInput {
            x_t: &x_t,
            cond: cond.base(),
            t: 500,
            alpha_bar: 0.5,
            swap_condition: false,
        };
        let size = format!("{h}x{w}");
        group.bench_function(BenchmarkId::new("forward", &size), |b| {
            b.iter(|| net.forward(&input).unwrap())
        });
        let grad = noisy(h, w);
        group.bench_function(BenchmarkId::new("forward_backward", &size), |b| {
            b.iter(|| {
                let (_, cache) = net.forward(&input).unwrap();
                net.backward(&cache, &grad).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, denoiser);
criterion_main!(benches);
