//! c_v topic coherence: boolean sliding windows, NPMI context vectors over
//! the topic's own words, and one-set indirect cosine similarity.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::ThemeError;

pub const CV_WINDOW: usize = 110;
pub const CV_EPSILON: f64 = 1e-12;

/// Token sets of every sliding window. A document no longer than the window
/// is a single window.
pub fn sliding_windows(docs: &[Vec<String>], window: usize) -> Vec<BTreeSet<&str>> {
    let mut out = Vec::new();
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        if doc.len() <= window {
            out.push(doc.iter().map(String::as_str).collect());
        } else {
            for w in doc.windows(window) {
                out.push(w.iter().map(String::as_str).collect());
            }
        }
    }
    out
}

/// Normalized PMI from window probabilities. A pair that fills every window
/// scores 1; a word that never occurs scores 0.
pub fn npmi(p_i: f64, p_j: f64, p_ij: f64, eps: f64) -> f64 {
    if p_i == 0.0 || p_j == 0.0 {
        return 0.0;
    }
    if p_ij >= 1.0 {
        return 1.0;
    }
    let joint = p_ij + eps;
    (joint / (p_i * p_j)).ln() / -joint.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceDetail {
    /// Mean over themes.
    pub coherence: f64,
    pub per_theme: Vec<f64>,
    /// Keywords that occur in no window.
    pub absent: Vec<String>,
    pub windows: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

/// c_v of each theme against tokenized reference documents. Each theme
/// score is the mean cosine between a word's NPMI vector and the theme's
/// summed vector, floored at 0.
pub fn coherence_cv(
    themes: &[Vec<String>],
    reference: &[Vec<String>],
    window: usize,
    eps: f64,
) -> Result<CoherenceDetail, ThemeError> {
    for (i, t) in themes.iter().enumerate() {
        if t.len() < 2 {
            return Err(ThemeError::TooFewKeywords(i));
        }
    }
    let windows = sliding_windows(reference, window.max(1));
    if windows.is_empty() {
        return Err(ThemeError::EmptyReference);
    }
    let n = windows.len() as f64;

    let vocab: BTreeSet<&str> = themes.iter().flatten().map(String::as_str).collect();
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let m = vocab.len();
    let mut single = vec![0usize; m];
    let mut joint = vec![0usize; m * m];
    for win in &windows {
        let present: Vec<usize> = win.iter().filter_map(|w| index.get(w).copied()).collect();
        for &a in &present {
            single[a] += 1;
            for &b in &present {
                joint[a * m + b] += 1;
            }
        }
    }
    let absent: Vec<String> = vocab.iter().filter(|w| single[index[*w]] == 0).map(|w| w.to_string()).collect();

    let per_theme: Vec<f64> = themes
        .iter()
        .map(|words| {
            let ids: Vec<usize> = words.iter().map(|w| index[w.as_str()]).collect();
            let vectors: Vec<Vec<f64>> = ids
                .iter()
                .map(|&a| {
                    ids.iter()
                        .map(|&b| npmi(single[a] as f64 / n, single[b] as f64 / n, joint[a * m + b] as f64 / n, eps))
                        .collect()
                })
                .collect();
            let mut total = vec![0.0; ids.len()];
            for v in &vectors {
                for (t, x) in total.iter_mut().zip(v) {
                    *t += x;
                }
            }
            let mean = vectors.iter().map(|v| cosine(v, &total)).sum::<f64>() / vectors.len() as f64;
            mean.clamp(0.0, 1.0)
        })
        .collect();
    let coherence = if per_theme.is_empty() { 0.0 } else { per_theme.iter().sum::<f64>() / per_theme.len() as f64 };
    Ok(CoherenceDetail { coherence, per_theme, absent, windows: windows.len() })
}
