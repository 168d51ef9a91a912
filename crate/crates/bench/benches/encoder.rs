use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use crossrec_bench::{bench_corpus, bench_model, encode_all, one_epoch, single_encoder_wiring};
use crossrec_core::disentangle::Stage1Wiring;

fn bench_encode_length(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_window");
    for l in [32usize, 64] {
        let corpus = bench_corpus(l);
        let model = bench_model(&corpus, l, Stage1Wiring::default());
        group.bench_function(format!("l{l}"), |b| {
            b.iter(|| black_box(encode_all(&model, &corpus)))
        });
    }
    group.finish();
}

fn bench_encoder_count(c: &mut Criterion) {
    let mut group = c.benchmark_group("stage1_epoch");
    group.sample_size(10);
    let corpus = bench_corpus(12);
    group.bench_function("one_encoder", |b| {
        b.iter(|| {
            let mut model = bench_model(&corpus, 16, single_encoder_wiring());
            one_epoch(&mut model, &corpus);
        })
    });
    group.bench_function("three_encoders", |b| {
        b.iter(|| {
            let mut model = bench_model(&corpus, 16, Stage1Wiring::default());
            one_epoch(&mut model, &corpus);
        })
    });
    group.finish();
}

criterion_group!(benches, bench_encode_length, bench_encoder_count);
criterion_main!(benches);
