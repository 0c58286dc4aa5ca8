use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use salient::{
    attention_rollout, decompx, forward, frugalize, globenc, tokenize, CompressionMethod, FrugalOptions, Target,
};
use salient_bench::{sentence, tiny_model};

fn encoder(c: &mut Criterion) {
    let model = tiny_model();
    let mut group = c.benchmark_group("encoder");
    for words in [8, 32, 60] {
        let text = sentence(words);
        let input = tokenize(&text, &model.vocab).unwrap();
        group.bench_with_input(BenchmarkId::new("tokenize", words), &text, |b, t| {
            b.iter(|| tokenize(black_box(t), &model.vocab).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward", words), &input.token_ids, |b, ids| {
            b.iter(|| forward(&model.bundle, black_box(ids)).unwrap())
        });
    }
    group.finish();
}

fn attribution(c: &mut Criterion) {
    let model = tiny_model();
    let mut group = c.benchmark_group("attribution");
    for words in [8, 32, 60] {
        let input = tokenize(&sentence(words), &model.vocab).unwrap();
        let trace = forward(&model.bundle, &input.token_ids).unwrap();
        group.bench_with_input(BenchmarkId::new("rollout", words), &trace, |b, t| b.iter(|| attention_rollout(t)));
        group.bench_with_input(BenchmarkId::new("globenc", words), &trace, |b, t| {
            b.iter(|| globenc(t, &model.bundle))
        });
        group.bench_with_input(BenchmarkId::new("decompx", words), &trace, |b, t| {
            b.iter(|| decompx(t, &model.bundle, Target::Predicted).unwrap())
        });
    }
    group.finish();
}

fn compression(c: &mut Criterion) {
    let model = tiny_model();
    let mut group = c.benchmark_group("frugalize");
    // 150 words spans several encoder windows.
    for words in [32, 150] {
        let text = sentence(words);
        for method in [CompressionMethod::GlobEnc, CompressionMethod::DecompX, CompressionMethod::Random] {
            let options = FrugalOptions::new(method, 50);
            group.bench_with_input(BenchmarkId::new(format!("{method}"), words), &text, |b, t| {
                b.iter(|| frugalize(black_box(t), &model, &options).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, encoder, attribution, compression);
criterion_main!(benches);
