//! Theme extraction against hand-enumerated fixtures and generator oracles.

use std::collections::BTreeMap;

use delusim_core::corpus::Cohort;
use delusim_core::features::{Embedder, EmbeddingProviderConfig};
use delusim_core::simulate::Condition;
use delusim_core::synth::three_theme_corpus;
use delusim_core::themes::{
    cluster_turns, coherence_cv, ctfidf_keywords, select_k, sliding_windows, theme_trends, ThemeModel, ThemeParams,
    ThemedTurn, TrendCell, CV_EPSILON,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn docs(raw: &[&str]) -> Vec<Vec<String>> {
    raw.iter().map(|d| d.split_whitespace().map(String::from).collect()).collect()
}

fn words(w: &[&str]) -> Vec<String> {
    w.iter().map(|s| s.to_string()).collect()
}

#[test]
fn two_word_theme_over_six_windows() {
    // window 3: "a b c d e" → {a,b,c} {b,c,d} {c,d,e}; the short documents are one window each
    let reference = docs(&["a b c d e", "a x", "y z", "a b"]);
    assert_eq!(sliding_windows(&reference, 3).len(), 6);
    // a occurs in 3 windows, b in 3, together in 2:
    // NPMI(a,b) = ln((2/6) / (3/6 · 3/6)) / −ln(2/6) = ln(4/3) / ln 3, NPMI(a,a) = NPMI(b,b) = 1
    let n = (4.0f64 / 3.0).ln() / 3.0f64.ln();
    // v_a = (1, n), v_b = (n, 1), both at the same angle to (1+n, 1+n)
    let expected = (1.0 + n) / (2.0f64.sqrt() * (1.0 + n * n).sqrt());
    let d = coherence_cv(&[words(&["a", "b"])], &reference, 3, CV_EPSILON).unwrap();
    assert_eq!(d.windows, 6);
    assert!((d.coherence - expected).abs() < 1e-9, "{} vs {expected}", d.coherence);
    assert!((d.per_theme[0] - expected).abs() < 1e-9);
}

#[test]
fn three_class_keyword_table() {
    let texts = ["apple apple banana", "banana cherry", "banana date", "date date", "egg apple"];
    let kw = ctfidf_keywords(&[0, 0, 1, 1, 2], &texts, 3, 10).unwrap();
    // 11 tokens over 3 classes: A = 11/3; f(apple) = f(banana) = f(date) = 3, f(cherry) = f(egg) = 1
    let common = (20.0f64 / 9.0).ln();
    let rare = (14.0f64 / 3.0).ln();
    let table: [&[(&str, f64)]; 3] = [
        &[("apple", 2.0 * common), ("banana", 2.0 * common), ("cherry", rare)],
        &[("date", 3.0 * common), ("banana", common)],
        &[("egg", rare), ("apple", common)],
    ];
    for (c, want) in table.iter().enumerate() {
        assert_eq!(kw[c].len(), want.len());
        for (got, (term, weight)) in kw[c].iter().zip(want.iter()) {
            assert_eq!(&got.term, term);
            assert!((got.weight - weight).abs() < 1e-9, "class {c} {term}: {} vs {weight}", got.weight);
        }
    }
}

fn theme_fixture(seed: u64) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let (texts, labels) = three_theme_corpus(30, seed);
    let embedder = Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap();
    let emb = embedder.embed(&texts).unwrap();
    (texts, emb, labels)
}

#[test]
fn select_k_recovers_three_themes() {
    let (texts, emb, labels) = theme_fixture(1);
    let params = ThemeParams { k_min: 2, k_max: 6, ..ThemeParams::default() };
    let (report, model) = select_k(&emb, &texts, &params, 42).unwrap();
    assert_eq!(report.selected_k, 3, "{:?}", report.per_k);
    // the selected clustering is the generator's partition
    let mut mapping = BTreeMap::new();
    for (&a, &l) in model.assignment.iter().zip(&labels) {
        assert_eq!(*mapping.entry(a).or_insert(l), l);
    }
    assert_eq!(model.sizes().iter().sum::<usize>(), texts.len());
    for v in report.per_k.values() {
        assert!((0.0..=1.0).contains(v));
    }

    let (again, _) = select_k(&emb, &texts, &params, 7).unwrap();
    for (k, v) in &report.per_k {
        assert!((v - again.per_k[k]).abs() < 0.05, "k={k}");
    }
}

#[test]
fn opposite_theme_drifts_are_recovered() {
    let model = ThemeModel { k: 2, centroids: vec![vec![1.0], vec![1.0]], assignment: vec![], keywords: vec![vec![], vec![]], seed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut turns = Vec::new();
    for conv in 0..40 {
        for round in 0..34 {
            let theme = (conv + round) % 2;
            let drift = if theme == 0 { 0.01 } else { -0.01 };
            let score = (0.5 + drift * (round as f64 - 16.5) + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            turns.push(ThemedTurn { theme, cohort: Cohort::Treatment, condition: Condition::Standard, assistant_model: "m".into(), round, score });
        }
    }
    let trends = theme_trends(&turns, &model);
    let cell = TrendCell { cohort: Cohort::Treatment, condition: Condition::Standard, assistant_model: "m".into() };
    let up = trends[0].slopes[&cell].unwrap();
    let down = trends[1].slopes[&cell].unwrap();
    assert!((up - 0.01).abs() < 0.002, "{up}");
    assert!((down + 0.01).abs() < 0.002, "{down}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn coherence_is_bounded_and_order_free(
        docs_raw in prop::collection::vec(prop::collection::vec(0usize..8, 1..12), 1..10),
        theme in prop::collection::btree_set(0usize..8, 2..5),
        window in 2usize..6,
    ) {
        let vocab = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];
        let reference: Vec<Vec<String>> = docs_raw.iter().map(|d| d.iter().map(|&i| vocab[i].to_string()).collect()).collect();
        let forward: Vec<String> = theme.iter().map(|&i| vocab[i].to_string()).collect();
        let mut backward = forward.clone();
        backward.reverse();
        let a = coherence_cv(&[forward], &reference, window, CV_EPSILON).unwrap();
        let b = coherence_cv(&[backward], &reference, window, CV_EPSILON).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.coherence));
        prop_assert!((a.coherence - b.coherence).abs() < 1e-12);
    }

    #[test]
    fn keywords_ignore_document_order(seed in 0u64..500) {
        let (texts, labels) = three_theme_corpus(4, seed);
        let mut order: Vec<usize> = (0..texts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<&String> = order.iter().map(|&i| &texts[i]).collect();
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = ctfidf_keywords(&labels, &texts, 3, 10).unwrap();
        let b = ctfidf_keywords(&shuffled_labels, &shuffled, 3, 10).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clustering_partitions_and_climbs(seed in 0u64..200, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = cluster_turns(&points, k, seed, 100).unwrap();
        let mut sizes = vec![0; k];
        for &a in &c.assignment {
            sizes[a] += 1;
        }
        prop_assert_eq!(sizes.iter().sum::<usize>(), points.len());
        prop_assert!(c.objective.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}
