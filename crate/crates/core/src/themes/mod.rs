//! Themes in SimUser turns: spherical k-means over turn embeddings,
//! class-based TF-IDF keywords per cluster, c_v coherence to choose the
//! cluster count, and per-theme score slopes.

mod coherence;
mod kmeans;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coherence::{coherence_cv, npmi, sliding_windows, CoherenceDetail, CV_EPSILON, CV_WINDOW};
pub use kmeans::{cluster_turns, Clustering};

use crate::analysis::{ols_slope_xy, AnalysisError};
use crate::corpus::Cohort;
use crate::simulate::Condition;
use crate::text::content_tokens;

/// Coherence values closer than this count as tied.
pub const COHERENCE_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThemeError {
    #[error("need at least {k} turns to form {k} clusters, got {n}")]
    TooFewTurns { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("theme {0} is empty")]
    EmptyTheme(usize),
    #[error("theme {0} has fewer than 2 keywords")]
    TooFewKeywords(usize),
    #[error("reference corpus is empty")]
    EmptyReference,
    #[error("invalid k range {0}..{1}")]
    BadRange(usize, usize),
    #[error("{0} texts for {1} embeddings")]
    Shape(usize, usize),
    #[error("embeddings have inconsistent dimensions")]
    Dimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub weight: f64,
}

/// c-TF-IDF over clusters: each cluster's texts form one class document and
/// weight(t, c) = tf(t, c) · ln(1 + A / f(t)), with A the mean class length
/// in tokens and f(t) the frequency of t across all classes. Terms are
/// ranked by weight, ties broken alphabetically.
pub fn ctfidf_keywords<S: AsRef<str>>(
    assignment: &[usize],
    texts: &[S],
    k: usize,
    top_n: usize,
) -> Result<Vec<Vec<Keyword>>, ThemeError> {
    if assignment.len() != texts.len() {
        return Err(ThemeError::Shape(texts.len(), assignment.len()));
    }
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| content_tokens(t.as_ref())).collect();
    ctfidf_from_tokens(assignment, &tokenized, k, top_n)
}

pub fn ctfidf_from_tokens(
    assignment: &[usize],
    tokens: &[Vec<String>],
    k: usize,
    top_n: usize,
) -> Result<Vec<Vec<Keyword>>, ThemeError> {
    let mut tf: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); k];
    let mut members = vec![0usize; k];
    for (&c, doc) in assignment.iter().zip(tokens) {
        members[c] += 1;
        for t in doc {
            *tf[c].entry(t.as_str()).or_default() += 1;
        }
    }
    if let Some(empty) = members.iter().position(|&m| m == 0) {
        return Err(ThemeError::EmptyTheme(empty));
    }
    let mut total: HashMap<&str, usize> = HashMap::new();
    for class in &tf {
        for (t, c) in class {
            *total.entry(t).or_default() += c;
        }
    }
    let avg_len = total.values().sum::<usize>() as f64 / k as f64;
    Ok(tf
        .iter()
        .map(|class| {
            let mut weighted: Vec<Keyword> = class
                .iter()
                .map(|(t, &c)| Keyword {
                    term: t.to_string(),
                    weight: c as f64 * (1.0 + avg_len / total[t] as f64).ln(),
                })
                .collect();
            weighted.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.term.cmp(&b.term)));
            weighted.truncate(top_n);
            weighted
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Theme index per input turn, in input order.
    pub assignment: Vec<usize>,
    pub keywords: Vec<Vec<Keyword>>,
    pub seed: u64,
}

impl ThemeModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_k: BTreeMap<usize, f64>,
    pub selected_k: usize,
    /// Keywords that never occur in the reference corpus, per k.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThemeParams {
    pub k_min: usize,
    pub k_max: usize,
    pub top_n: usize,
    pub window: usize,
    pub max_iters: usize,
}

impl Default for ThemeParams {
    fn default() -> Self {
        ThemeParams { k_min: 2, k_max: 15, top_n: 10, window: CV_WINDOW, max_iters: 100 }
    }
}

/// Fit a theme model for every k in the range, score each by c_v against the
/// texts themselves, and keep the most coherent (ties go to the smaller k).
pub fn select_k<S: AsRef<str> + Sync>(
    embeddings: &[Vec<f64>],
    texts: &[S],
    params: &ThemeParams,
    seed: u64,
) -> Result<(CoherenceReport, ThemeModel), ThemeError> {
    if embeddings.len() != texts.len() {
        return Err(ThemeError::Shape(texts.len(), embeddings.len()));
    }
    if params.k_min == 0 || params.k_min > params.k_max || params.k_max > embeddings.len() {
        return Err(ThemeError::BadRange(params.k_min, params.k_max));
    }
    let tokens: Vec<Vec<String>> = texts.iter().map(|t| content_tokens(t.as_ref())).collect();
    let fits: Vec<(usize, f64, ThemeModel, Vec<String>)> = (params.k_min..=params.k_max)
        .into_par_iter()
        .map(|k| {
            let clustering = cluster_turns(embeddings, k, seed, params.max_iters)?;
            let keywords = ctfidf_from_tokens(&clustering.assignment, &tokens, k, params.top_n)?;
            let sets: Vec<Vec<String>> = keywords.iter().map(|kw| kw.iter().map(|w| w.term.clone()).collect()).collect();
            let detail = coherence_cv(&sets, &tokens, params.window, CV_EPSILON)?;
            let model = ThemeModel { k, centroids: clustering.centroids, assignment: clustering.assignment, keywords, seed };
            let flags = detail.absent.iter().map(|w| format!("k={k}: keyword '{w}' absent from reference")).collect();
            Ok((k, detail.coherence, model, flags))
        })
        .collect::<Result<_, ThemeError>>()?;

    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.1 > fits[best].1 + COHERENCE_TIE_TOLERANCE {
            best = i;
        }
    }
    let per_k = fits.iter().map(|f| (f.0, f.1)).collect();
    let flags = fits.iter().flat_map(|f| f.3.iter().cloned()).collect();
    let (selected_k, _, model, _) = fits.into_iter().nth(best).expect("non-empty range");
    Ok((CoherenceReport { per_k, selected_k, flags }, model))
}

/// One scored SimUser turn with its theme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemedTurn {
    pub theme: usize,
    pub cohort: Cohort,
    pub condition: Condition,
    pub assistant_model: String,
    pub round: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrendCell {
    pub cohort: Cohort,
    pub condition: Condition,
    pub assistant_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeTrend {
    pub theme: usize,
    pub keywords: Vec<String>,
    /// Slope of the per-round mean score; absent when fewer than two rounds are occupied.
    pub slopes: BTreeMap<TrendCell, Option<f64>>,
    pub flags: Vec<String>,
}

/// Per theme and cell, the slope of per-round mean score over the rounds in
/// which the theme occurs.
pub fn theme_trends(turns: &[ThemedTurn], model: &ThemeModel) -> Vec<ThemeTrend> {
    // theme → cell → round → (sum, count)
    let mut acc: BTreeMap<usize, BTreeMap<TrendCell, BTreeMap<usize, (f64, usize)>>> = BTreeMap::new();
    for t in turns {
        let cell = TrendCell { cohort: t.cohort, condition: t.condition, assistant_model: t.assistant_model.clone() };
        let slot = acc.entry(t.theme).or_default().entry(cell).or_default().entry(t.round).or_default();
        slot.0 += t.score;
        slot.1 += 1;
    }
    let all_cells: Vec<TrendCell> = {
        let mut cells: Vec<TrendCell> = acc.values().flat_map(|m| m.keys().cloned()).collect();
        cells.sort();
        cells.dedup();
        cells
    };
    (0..model.k)
        .map(|theme| {
            let mut flags = Vec::new();
            let slopes = all_cells
                .iter()
                .map(|cell| {
                    let rounds = acc.get(&theme).and_then(|m| m.get(cell));
                    let (x, y): (Vec<f64>, Vec<f64>) = rounds
                        .map(|r| r.iter().map(|(&round, &(s, c))| (round as f64, s / c as f64)).unzip())
                        .unwrap_or_default();
                    let slope = match ols_slope_xy(&x, &y) {
                        Ok(s) => Some(s),
                        Err(AnalysisError::TooFew { got, .. }) => {
                            flags.push(format!(
                                "{}/{}/{}: {got} occupied round(s), slope omitted",
                                cell.cohort.as_str(),
                                cell.condition.as_str(),
                                cell.assistant_model
                            ));
                            None
                        }
                        Err(e) => unreachable!("rounds are distinct: {e}"),
                    };
                    (cell.clone(), slope)
                })
                .collect();
            ThemeTrend {
                theme,
                keywords: model.keywords.get(theme).map(|k| k.iter().map(|w| w.term.clone()).collect()).unwrap_or_default(),
                slopes,
                flags,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_classes_keep_their_vocabulary() {
        let texts = ["apple banana apple", "banana cherry", "rocket orbit", "orbit launch rocket"];
        let kw = ctfidf_keywords(&[0, 0, 1, 1], &texts, 2, 10).unwrap();
        let zero: Vec<&str> = kw[0].iter().map(|k| k.term.as_str()).collect();
        assert_eq!(zero, ["apple", "banana", "cherry"]);
        assert!(kw[1].iter().all(|k| ["rocket", "orbit", "launch"].contains(&k.term.as_str())));
    }

    #[test]
    fn shared_term_ranks_below_exclusive_term() {
        // "common" appears twice in each class; "alpha" twice only in class 0
        let texts = ["common alpha", "common alpha", "common beta", "common gamma"];
        let kw = ctfidf_keywords(&[0, 0, 1, 1], &texts, 2, 10).unwrap();
        let w = |t: &str| kw[0].iter().find(|k| k.term == t).unwrap().weight;
        assert!(w("common") < w("alpha"));
        assert_eq!(kw[0][0].term, "alpha");
    }

    #[test]
    fn empty_theme_is_an_error() {
        assert_eq!(ctfidf_keywords(&[0, 0], &["a b", "c"], 2, 5), Err(ThemeError::EmptyTheme(1)));
    }

    #[test]
    fn ties_break_alphabetically() {
        let kw = ctfidf_keywords(&[0, 1], &["zeta alpha mid", "other"], 2, 2).unwrap();
        let terms: Vec<&str> = kw[0].iter().map(|k| k.term.as_str()).collect();
        assert_eq!(terms, ["alpha", "mid"]);
    }

    #[test]
    fn single_theme_trend_matches_plain_slope() {
        let model = ThemeModel { k: 1, centroids: vec![vec![1.0]], assignment: vec![], keywords: vec![vec![]], seed: 0 };
        let turns: Vec<ThemedTurn> = (0..10)
            .flat_map(|r| {
                (0..3).map(move |c| ThemedTurn {
                    theme: 0,
                    cohort: Cohort::Treatment,
                    condition: Condition::Standard,
                    assistant_model: "m".into(),
                    round: r,
                    score: 0.2 + 0.01 * r as f64 + 0.05 * c as f64,
                })
            })
            .collect();
        let trends = theme_trends(&turns, &model);
        let slope = trends[0].slopes.values().next().unwrap().unwrap();
        assert!((slope - 0.01).abs() < 1e-12);
    }

    #[test]
    fn sparse_theme_is_flagged() {
        let model = ThemeModel { k: 2, centroids: vec![], assignment: vec![], keywords: vec![vec![], vec![]], seed: 0 };
        let turn = |theme, round| ThemedTurn {
            theme,
            cohort: Cohort::Control,
            condition: Condition::Standard,
            assistant_model: "m".into(),
            round,
            score: 0.5,
        };
        let trends = theme_trends(&[turn(0, 0), turn(0, 1), turn(1, 4)], &model);
        assert_eq!(trends[1].slopes.values().next().unwrap(), &None);
        assert_eq!(trends[1].flags.len(), 1);
        assert!(trends[0].flags.is_empty());
    }
}
