//! Per-user covariates: activity count, lexicon-category proportions and a
//! mean-pooled text embedding.

pub mod embed;
pub mod lexicon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::UserRecord;
use crate::net::TransportError;
pub use embed::{
    cosine, l2_normalize, Embedder, EmbeddingProvider, EmbeddingProviderConfig, HashingProvider, ProviderKind, RemoteProvider,
    EMBED_TOKEN_ENV,
};
pub use lexicon::{lexicon_scores, Category, Lexicon, LexiconCounts};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("embedding config: {0}")]
    Config(String),
    #[error("embedding batch {batch} failed: {source}")]
    Transport {
        batch: usize,
        #[source]
        source: TransportError,
    },
    #[error("embedding server protocol violation: {0}")]
    Protocol(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("user {0} has no posts")]
    NoPosts(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub user_id: String,
    pub post_count: usize,
    pub lexicon_props: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Set when every post embedded to the zero vector.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_embedding: bool,
}

impl CovariateVector {
    /// Flattened `[post_count, lexicon..., embedding...]` row for matching.
    pub fn to_row(&self) -> Vec<f64> {
        let mut row = Vec::with_capacity(1 + self.lexicon_props.len() + self.embedding.len());
        row.push(self.post_count as f64);
        row.extend(&self.lexicon_props);
        row.extend(&self.embedding);
        row
    }
}

/// Column names matching [`CovariateVector::to_row`].
pub fn covariate_names(lexicon: &Lexicon, dimension: usize) -> Vec<String> {
    let mut names = vec!["post_count".to_string()];
    names.extend(lexicon.names().map(|n| format!("lex_{n}")));
    names.extend((0..dimension).map(|i| format!("emb_{i}")));
    names
}

pub fn user_covariates(user: &UserRecord, lexicon: &Lexicon, embedder: &Embedder) -> Result<CovariateVector, FeatureError> {
    if user.posts.is_empty() {
        return Err(FeatureError::NoPosts(user.user_id.clone()));
    }
    // Canonical order so the float sums do not depend on input order.
    let mut posts: Vec<_> = user.posts.iter().collect();
    posts.sort_by(|a, b| a.post_id.cmp(&b.post_id).then_with(|| a.body.cmp(&b.body)));

    let mut counts = LexiconCounts::zeros(lexicon.len());
    for p in &posts {
        counts.add(&lexicon.counts(&p.body));
    }

    let bodies: Vec<&str> = posts.iter().map(|p| p.body.as_str()).collect();
    let vectors = embedder.embed(&bodies)?;
    let mut pooled = vec![0.0; embedder.dimension()];
    for v in &vectors {
        for (acc, x) in pooled.iter_mut().zip(v) {
            *acc += x;
        }
    }
    let n = vectors.len() as f64;
    pooled.iter_mut().for_each(|x| *x /= n);
    let zero_embedding = !embed::l2_normalize(&mut pooled);

    Ok(CovariateVector {
        user_id: user.user_id.clone(),
        post_count: user.posts.len(),
        lexicon_props: counts.proportions(),
        embedding: pooled,
        zero_embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Cohort, Post};

    fn user(bodies: &[&str]) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            posts: bodies
                .iter()
                .enumerate()
                .map(|(i, b)| Post {
                    post_id: format!("p{i}"),
                    author_id: "u".into(),
                    community: "c".into(),
                    created_at: i as i64,
                    body: b.to_string(),
                })
                .collect(),
            cohort: Cohort::Control,
        }
    }

    fn lex() -> Lexicon {
        Lexicon::parse("%\n1 affect\n2 threat\n%\nfeel* 1\nwatch* 2\n").unwrap()
    }

    fn embedder() -> Embedder {
        Embedder::from_config(&EmbeddingProviderConfig::hashing(64)).unwrap()
    }

    #[test]
    fn single_post_user_matches_post_features() {
        let e = embedder();
        let cov = user_covariates(&user(&["I feel watched"]), &lex(), &e).unwrap();
        assert_eq!(cov.post_count, 1);
        assert_eq!(cov.lexicon_props, lexicon_scores("I feel watched", &lex()));
        let direct = e.embed_one("I feel watched").unwrap();
        for (a, b) in cov.embedding.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_length_posts_average() {
        // 4 tokens each: [1/4, 0] and [1/4, 2/4]
        let cov = user_covariates(&user(&["i feel fine today", "feel watched watching me"]), &lex(), &embedder()).unwrap();
        assert_eq!(cov.lexicon_props, vec![0.25, 0.25]);
    }

    #[test]
    fn permutation_invariant() {
        let e = embedder();
        let a = user_covariates(&user(&["one feel", "two watch", "three"]), &lex(), &e).unwrap();
        let mut u = user(&["one feel", "two watch", "three"]);
        u.posts.reverse();
        let b = user_covariates(&u, &lex(), &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_user_is_error() {
        assert!(matches!(user_covariates(&user(&[]), &lex(), &embedder()), Err(FeatureError::NoPosts(_))));
    }

    #[test]
    fn row_layout() {
        let cov = user_covariates(&user(&["feel"]), &lex(), &embedder()).unwrap();
        assert_eq!(cov.to_row().len(), covariate_names(&lex(), 64).len());
        assert_eq!(cov.to_row()[0], 1.0);
    }
}
