//! Throughput of the numerical kernels that dominate a pipeline run.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use delusim_core::analysis::{lowess, LowessParams};
use delusim_core::features::{Embedder, EmbeddingProviderConfig};
use delusim_core::matching::{fit_propensity, standardize, sweep_and_select, LogisticParams, SweepParams};
use delusim_core::synth::{confounded_covariates, drifting_trajectories, three_theme_corpus};
use delusim_core::themes::{cluster_turns, coherence_cv, CV_EPSILON, CV_WINDOW};

fn matching(c: &mut Criterion) {
    let n = 5000;
    let (m, treated) = confounded_covariates(n, 20, 3, 1.0, 1);
    let ids: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
    let z = standardize(m.view()).unwrap();
    c.bench_function("fit_propensity 5000x20", |b| {
        b.iter(|| fit_propensity(black_box(z.z.view()), &treated, &LogisticParams::default()).unwrap())
    });
    let scores = fit_propensity(z.z.view(), &treated, &LogisticParams::default()).unwrap().scores(z.z.view());
    c.bench_function("sweep_and_select 5000x20 k=3..10", |b| {
        b.iter(|| sweep_and_select(black_box(m.view()), &ids, &treated, &scores, &SweepParams::default()).unwrap())
    });
}

fn themes(c: &mut Criterion) {
    let (texts, _) = three_theme_corpus(100, 1);
    let embedder = Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap();
    let reference: Vec<Vec<String>> =
        texts.iter().map(|t| t.split_whitespace().map(|w| w.to_lowercase()).collect()).collect();
    let topics: Vec<Vec<String>> = reference.iter().step_by(100).map(|d| d.iter().take(10).cloned().collect()).collect();
    c.bench_function("coherence_cv 3 themes x 10 words, 300 docs", |b| {
        b.iter(|| coherence_cv(black_box(&topics), &reference, CV_WINDOW, CV_EPSILON).unwrap())
    });
    c.bench_function("hashing embed 300 docs dim 384 (uncached)", |b| {
        b.iter(|| Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap().embed(black_box(&texts)).unwrap())
    });
    let emb = embedder.embed(&texts).unwrap();
    c.bench_function("k-means k=5 on 300x384", |b| b.iter(|| cluster_turns(black_box(&emb), 5, 0, 100).unwrap()));
}

fn trajectories(c: &mut Criterion) {
    let series = drifting_trajectories(1, 34, 0.2, 0.02, 0.05, 3).remove(0);
    c.bench_function("lowess 34 rounds", |b| b.iter(|| lowess(black_box(&series), &LowessParams::default()).unwrap()));
}

criterion_group!(benches, matching, themes, trajectories);
criterion_main!(benches);
