use criterion::{criterion_group, criterion_main, Criterion};
use stylize_atlas::trainer::Stylizer;
use stylize_atlas::StubBackend;
use stylize_atlas_bench::editing_setup;

fn finetune_step(c: &mut Criterion) {
    let backend = StubBackend::new(0);
    let (decomp, region, cfg) = editing_setup();
    let mut stylizer = Stylizer::new(decomp, region, cfg, &backend).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("finetune_step", |b| b.iter(|| stylizer.step().unwrap()));
    group.finish();
}

criterion_group!(benches, finetune_step);
criterion_main!(benches);
