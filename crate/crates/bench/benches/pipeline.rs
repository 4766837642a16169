use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use roll_bench::{document, fusion_inputs, heads};
use roll_core::characters::spatio_temporal_filter;
use roll_core::scoring::mock_tokens;
use roll_core::synth::{episode_store, filter_corpus};
use roll_core::{
    fuse, identify_episode, slice_document, FilterParams, FrameIndexStore, MockBackend, ScorerBackend, WindowParams,
};

fn slicing(c: &mut Criterion) {
    let mut g = c.benchmark_group("slice_document");
    for words in [250, 1605, 10_000] {
        let doc = document(words);
        g.throughput(Throughput::Elements(words as u64));
        g.bench_with_input(BenchmarkId::from_parameter(words), &doc, |b, doc| {
            b.iter(|| slice_document(black_box(doc), WindowParams::default()).unwrap())
        });
    }
    g.finish();
}

fn mock_backend(c: &mut Criterion) {
    let backend = MockBackend::default();
    let text = format!("[CLS] {} [SEP] answer [SEP]", document(200));
    c.bench_function("mock_tokens/200", |b| b.iter(|| mock_tokens(black_box(&text))));
    c.bench_function("mock_embed/200", |b| {
        b.iter(|| backend.embed(black_box(&text)).unwrap())
    });
}

fn fusion(c: &mut Criterion) {
    let dim = 768;
    let (scores, emb) = fusion_inputs(4, dim);
    let mut g = c.benchmark_group("fuse");
    for head in heads(dim) {
        g.bench_function(head.method().as_str(), |b| {
            b.iter(|| fuse(black_box(&scores), Some(&emb), &head).unwrap())
        });
    }
    g.finish();
}

fn character_filter(c: &mut Criterion) {
    let scenes = filter_corpus(20, 30, 0.2, 3);
    c.bench_function("spatio_temporal_filter/20_scenes", |b| {
        b.iter(|| {
            for s in &scenes {
                black_box(spatio_temporal_filter(&s.detections, &s.shots, FilterParams::default()).unwrap());
            }
        })
    });
}

fn episode_identification(c: &mut Criterion) {
    let (m, queries) = episode_store(20, 200, 512, 0.1, 1, 6, 5);
    let store = FrameIndexStore::new(&m).unwrap();
    let frames: Vec<&[f64]> = queries[0].frames.iter().map(Vec::as_slice).collect();
    c.bench_function("identify_episode/4000x512", |b| {
        b.iter(|| identify_episode(black_box(&frames), &store, None).unwrap())
    });
}

criterion_group!(
    benches,
    slicing,
    mock_backend,
    fusion,
    character_filter,
    episode_identification
);
criterion_main!(benches);
