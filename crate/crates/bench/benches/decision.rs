use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use entropycache_bench::weights;
use entropycache_core::decoding::{DecodeConfig, Generator};
use entropycache_core::mathcore::{entropy, softmax_row};
use entropycache_core::policy::{select_recent, PolicySpec};

fn entropy_by_vocab(c: &mut Criterion) {
    let mut group = c.benchmark_group("entropy");
    for &v in &[320usize, 32_000, 128_000] {
        let logits: Vec<f32> = (0..v).map(|i| ((i * 7919) % 1000) as f32 / 250.0).collect();
        let p = softmax_row(&logits).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(v), &p, |b, p| {
            b.iter(|| entropy(black_box(p)))
        });
    }
    group.finish();
}

fn recent_selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_recent");
    for &n in &[64usize, 256, 1024] {
        let history: Vec<Option<usize>> = (0..n)
            .map(|i| if i % 3 == 0 { None } else { Some(1 + i / 4) })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &history, |b, h| {
            b.iter(|| select_recent(black_box(h), 64, n / 4 + 1, 3))
        });
    }
    group.finish();
}

/// End-to-end generation per policy on one small model.
fn policies(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    let w = weights(2, 64);
    let prompt: Vec<u32> = (0..256).map(|i| (i % 90) as u32 + 32).collect();
    let config = DecodeConfig {
        gen_length: 64,
        ..DecodeConfig::default()
    };
    for (name, spec) in [
        ("baseline", PolicySpec::baseline()),
        ("static-block", PolicySpec::static_block(32)),
        ("entropy-cache", PolicySpec::entropy_cache(1.5, 64)),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| Generator::new(&w, &config).run(&prompt, &spec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, entropy_by_vocab, recent_selection, policies);
criterion_main!(benches);
