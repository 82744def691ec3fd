//! Per-utterance gradient evaluation over one batch: rayon pool vs a plain
//! loop. On a single core both should be close; the gap grows with cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use sublab::nn::{init_model, EncoderConfig};
use sublab::par;
use sublab::synth::{
    build_corpus, default_languages, embedding_table, CorpusSpec, FrameParams, LanguageParams,
};

fn batch_gradients(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let model = init_model(cfg, 0).unwrap();
    let langs = default_languages(0, &LanguageParams::default()).unwrap();
    let emb = embedding_table(0, cfg.input_dim, 1.0);
    let corpus = build_corpus(
        &CorpusSpec::uniform(&["en"], 20),
        &langs,
        &emb,
        &FrameParams::default(),
        0,
    )
    .unwrap();
    let batch: Vec<_> = corpus.train.iter().take(16).collect();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("parallel", batch.len()), |b| {
        b.iter(|| {
            par::map(&batch, |u| {
                model.ctc_loss_and_grads(&u.frames, &u.target()).unwrap()
            })
        })
    });
    group.bench_function(BenchmarkId::new("sequential", batch.len()), |b| {
        b.iter(|| {
            par::map_sequential(&batch, |u| {
                model.ctc_loss_and_grads(&u.frames, &u.target()).unwrap()
            })
        })
    });
    group.finish();

    let mut group = c.benchmark_group("forward");
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&batch, |u| black_box(model.log_probs(&u.frames).unwrap())))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&batch, |u| black_box(model.log_probs(&u.frames).unwrap())))
    });
    group.finish();
}

criterion_group!(benches, batch_gradients);
criterion_main!(benches);
