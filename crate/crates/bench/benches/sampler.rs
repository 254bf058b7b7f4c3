use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pyrdiff_bench::{condition, models, schedules};
use pyrdiff_core::diffusion::sample;
use pyrdiff_core::{Corrector, SamplerConfig};

const STEPS: usize = 40;

fn sampler(c: &mut Criterion) {
    let (denoiser, corrector) = models(STEPS);
    let mut group = c.benchmark_group("sample_64x96");
    group.sample_size(10);
    for pyramid in ["[1,1,1,1]", "[1,1,2,2]", "[1,2,4,8]"] {
        let (ns, ps) = schedules(STEPS, pyramid);
        let cond = condition(64, 96, &ps);
        for (mode, ddim) in [("ddpm", None), ("ddim4", Some(4))] {
            let cfg = SamplerConfig {
                ddim_steps: ddim,
                ..SamplerConfig::default()
            };
            group.bench_function(BenchmarkId::new(mode, pyramid), |b| {
                b.iter(|| {
                    sample(
                        &ns,
                        &ps,
                        &cfg,
                        &denoiser,
                        Some(&corrector as &dyn Corrector<f32>),
                        &cond,
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sampler);
criterion_main!(benches);
