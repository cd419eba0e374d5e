//! DelusionScore: an embedding-space logistic classifier whose positive-class
//! probability measures how delusion-related a text reads.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Embedder, FeatureError};
use crate::matching::{fit_logistic, predict_proba, LogisticParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("corpus needs at least {needed} items per class (delusional {pos}, non-delusional {neg})")]
    TooFewPerClass { needed: usize, pos: usize, neg: usize },
    #[error("both labels are required")]
    SingleClass,
    #[error("test set is empty")]
    EmptyTest,
    #[error("embedding provider fingerprint {active} does not match model fingerprint {model}")]
    FingerprintMismatch { model: String, active: String },
    #[error("model dimension {model} does not match provider dimension {provider}")]
    Dimension { model: usize, provider: usize },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
    #[error("labeled corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Delusional,
    NonDelusional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPost {
    pub text: String,
    pub label: Label,
    #[serde(rename = "community", default)]
    pub source_community: String,
}

/// Read the labeled JSONL corpus. Malformed lines are errors: a silently
/// shrunken training set would change the model.
pub fn load_labeled(path: &Path) -> Result<Vec<LabeledPost>, ScorerError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScorerError::Corpus { line: 0, message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let post: LabeledPost =
            serde_json::from_str(line).map_err(|e| ScorerError::Corpus { line: i + 1, message: e.to_string() })?;
        if post.text.trim().is_empty() {
            return Err(ScorerError::Corpus { line: i + 1, message: "empty text".into() });
        }
        out.push(post);
    }
    Ok(out)
}

/// Stratified shuffle split; `round(n_class × test_fraction)` of each class is held out.
pub fn split_corpus(
    corpus: &[LabeledPost],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledPost>, Vec<LabeledPost>), ScorerError> {
    let pos: Vec<&LabeledPost> = corpus.iter().filter(|p| p.label == Label::Delusional).collect();
    let neg: Vec<&LabeledPost> = corpus.iter().filter(|p| p.label == Label::NonDelusional).collect();
    if pos.len() < 4 || neg.len() < 4 {
        return Err(ScorerError::TooFewPerClass { needed: 4, pos: pos.len(), neg: neg.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut class in [pos, neg] {
        class.shuffle(&mut rng);
        let n_test = ((class.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(class.len() - 1);
        test.extend(class[..n_test].iter().map(|p| (*p).clone()));
        train.extend(class[n_test..].iter().map(|p| (*p).clone()));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub test_fraction: f64,
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub n_train: usize,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub version: u32,
    pub embedding_config_fingerprint: String,
    pub provider_identity: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_metadata: TrainMetadata,
}

impl ScorerModel {
    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        let json = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, json + "\n")
            .map_err(|e| ScorerError::ModelFile { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ScorerError> {
        let err = |message: String| ScorerError::ModelFile { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let model: ScorerModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(err(format!("unsupported model version {}", model.version)));
        }
        Ok(model)
    }

    pub fn check_provider(&self, embedder: &Embedder) -> Result<(), ScorerError> {
        let active = embedder.fingerprint();
        if active != self.embedding_config_fingerprint {
            return Err(ScorerError::FingerprintMismatch { model: self.embedding_config_fingerprint.clone(), active });
        }
        if embedder.dimension() != self.weights.len() {
            return Err(ScorerError::Dimension { model: self.weights.len(), provider: embedder.dimension() });
        }
        Ok(())
    }

    /// Probability for an already-embedded text.
    pub fn score_embedding(&self, embedding: &[f64]) -> f64 {
        predict_proba(&self.weights, self.bias, embedding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerParams {
    pub logistic: LogisticParams,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for ScorerParams {
    fn default() -> Self {
        ScorerParams {
            logistic: LogisticParams { l2_lambda: 1e-3, max_iter: 3000, tol: 1e-6 },
            seed: 0,
            test_fraction: 0.25,
        }
    }
}

pub fn train_scorer(train: &[LabeledPost], embedder: &Embedder, params: &ScorerParams) -> Result<ScorerModel, ScorerError> {
    if !train.iter().any(|p| p.label == Label::Delusional) || !train.iter().any(|p| p.label == Label::NonDelusional) {
        return Err(ScorerError::SingleClass);
    }
    let texts: Vec<&str> = train.iter().map(|p| p.text.as_str()).collect();
    let vectors = embedder.embed(&texts)?;
    let dim = embedder.dimension();
    let x = Array2::from_shape_vec((vectors.len(), dim), vectors.into_iter().flatten().collect())
        .expect("embedder returns fixed-dimension vectors");
    let y: Array1<f64> = train.iter().map(|p| if p.label == Label::Delusional { 1.0 } else { 0.0 }).collect();
    let fit = fit_logistic(x.view(), y.view(), &params.logistic);
    Ok(ScorerModel {
        version: MODEL_FORMAT_VERSION,
        embedding_config_fingerprint: embedder.fingerprint(),
        provider_identity: embedder.identity(),
        weights: fit.weights,
        bias: fit.bias,
        train_metadata: TrainMetadata {
            seed: params.seed,
            test_fraction: params.test_fraction,
            l2_lambda: params.logistic.l2_lambda,
            max_iter: params.logistic.max_iter,
            tol: params.logistic.tol,
            n_train: train.len(),
            iterations_used: fit.iterations_used,
            converged: fit.converged,
        },
    })
}

pub fn delusion_score(model: &ScorerModel, embedder: &Embedder, text: &str) -> Result<f64, ScorerError> {
    model.check_provider(embedder)?;
    Ok(model.score_embedding(&embedder.embed_one(text)?))
}

pub fn delusion_scores<S: AsRef<str>>(model: &ScorerModel, embedder: &Embedder, texts: &[S]) -> Result<Vec<f64>, ScorerError> {
    model.check_provider(embedder)?;
    Ok(embedder.embed(texts)?.iter().map(|v| model.score_embedding(v)).collect())
}

/// A model bound to the provider it was trained against.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    model: &'a ScorerModel,
    embedder: &'a Embedder,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a ScorerModel, embedder: &'a Embedder) -> Result<Self, ScorerError> {
        model.check_provider(embedder)?;
        Ok(Scorer { model, embedder })
    }

    pub fn score(&self, text: &str) -> Result<f64, ScorerError> {
        delusion_score(self.model, self.embedder, text)
    }

    pub fn score_many<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<f64>, ScorerError> {
        delusion_scores(self.model, self.embedder, texts)
    }

    pub fn model(&self) -> &ScorerModel {
        self.model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Rows are actual (non-delusional, delusional), columns predicted in the same order.
    pub confusion: [[usize; 2]; 2],
    pub threshold: f64,
}

impl EvalMetrics {
    pub fn from_confusion(confusion: [[usize; 2]; 2], threshold: f64) -> Result<Self, ScorerError> {
        let [[tn, fp], [fneg, tp]] = confusion;
        if tp + fneg == 0 || tn + fp == 0 {
            return Err(ScorerError::SingleClass);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let specificity = ratio(tn, tn + fp);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Ok(EvalMetrics {
            balanced_accuracy: (recall + specificity) / 2.0,
            f1,
            precision,
            recall,
            confusion,
            threshold,
        })
    }
}

/// Metrics from already-computed scores; positive class is `Delusional`.
pub fn metrics_from_scores(scores: &[f64], labels: &[Label], threshold: f64) -> Result<EvalMetrics, ScorerError> {
    if scores.is_empty() {
        return Err(ScorerError::EmptyTest);
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        let actual = usize::from(l == Label::Delusional);
        let predicted = usize::from(s >= threshold);
        confusion[actual][predicted] += 1;
    }
    EvalMetrics::from_confusion(confusion, threshold)
}

pub fn evaluate_scorer(
    model: &ScorerModel,
    embedder: &Embedder,
    test: &[LabeledPost],
    threshold: f64,
) -> Result<EvalMetrics, ScorerError> {
    if test.is_empty() {
        return Err(ScorerError::EmptyTest);
    }
    let texts: Vec<&str> = test.iter().map(|p| p.text.as_str()).collect();
    let scores = delusion_scores(model, embedder, &texts)?;
    let labels: Vec<Label> = test.iter().map(|p| p.label).collect();
    metrics_from_scores(&scores, &labels, threshold)
}
