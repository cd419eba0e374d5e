//! Trajectory and fidelity statistics: per-round group means, slopes, LOWESS
//! curves, effect sizes and t-tests.

mod fidelity;
mod lowess;
mod stats;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Cohort;
use crate::simulate::{Condition, Transcript, TranscriptStatus};

pub use fidelity::{fidelity_eval, FidelityInput, FidelityReport, FidelityRow, FidelityUser};
pub use lowess::{lowess, Lowess, LowessParams};
pub use stats::{
    cohens_d, ln_gamma, mean, ols_slope, ols_slope_xy, paired_t, pearson, regularized_incomplete_beta, t_two_sided_p, variance,
    welch_t, EffectReport, TestKind,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("{what} needs at least {needed} values, got {got}")]
    TooFew { what: &'static str, needed: usize, got: usize },
    #[error("{0}: zero variance")]
    ZeroVariance(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("group {0} is empty")]
    EmptyGroup(String),
}

/// Per-round SimUser scores of one conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub conversation_id: String,
    pub cohort: Cohort,
    pub condition: Condition,
    pub assistant_model: String,
    pub stratum: Option<usize>,
    pub scores: Vec<f64>,
}

impl Trajectory {
    /// SimUser scores of a Complete transcript, in round order. Truncated,
    /// failed or unscored transcripts yield `None`.
    pub fn from_transcript(t: &Transcript) -> Option<Trajectory> {
        if t.status != TranscriptStatus::Complete {
            return None;
        }
        let scores: Option<Vec<f64>> = t.simuser_turns().map(|turn| turn.score).collect();
        Some(Trajectory {
            conversation_id: t.conversation_id.clone(),
            cohort: t.cohort,
            condition: t.condition,
            assistant_model: t.assistant_model.clone(),
            stratum: t.stratum,
            scores: scores?,
        })
    }

    pub fn key(&self, with_stratum: bool) -> GroupKey {
        GroupKey {
            cohort: self.cohort,
            condition: self.condition,
            assistant_model: self.assistant_model.clone(),
            stratum: if with_stratum { self.stratum } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub cohort: Cohort,
    pub condition: Condition,
    pub assistant_model: String,
    pub stratum: Option<usize>,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.cohort.as_str(), self.condition.as_str(), self.assistant_model)?;
        if let Some(s) = self.stratum {
            write!(f, "/stratum{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub n: usize,
    /// Trajectories dropped because they were shorter than the group's round count.
    pub excluded: usize,
    pub mean_score: f64,
    pub slope: f64,
    pub per_round_means: Vec<f64>,
    pub lowess_curve: Vec<f64>,
    pub lowess_degenerate: Vec<usize>,
    /// Slopes of the individual conversations, keyed by conversation id.
    pub conversation_slopes: BTreeMap<String, f64>,
}

/// Summary of trajectories that share a key. The group's round count is the
/// longest trajectory; shorter ones are excluded and counted.
pub fn group_summary(key: GroupKey, trajectories: &[&Trajectory], params: &LowessParams) -> Result<GroupSummary, AnalysisError> {
    let rounds = trajectories.iter().map(|t| t.scores.len()).max().unwrap_or(0);
    if rounds == 0 {
        return Err(AnalysisError::EmptyGroup(key.to_string()));
    }
    let mut full: Vec<&Trajectory> = trajectories.iter().copied().filter(|t| t.scores.len() == rounds).collect();
    let excluded = trajectories.len() - full.len();
    for t in &full {
        if let Some(&bad) = t.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(AnalysisError::OutOfRange(bad));
        }
    }
    // Sums below run in conversation-id order so the result does not depend on input order.
    full.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
    let n = full.len();
    let per_round_means: Vec<f64> =
        (0..rounds).map(|r| full.iter().map(|t| t.scores[r]).sum::<f64>() / n as f64).collect();
    let mean_score = per_round_means.iter().sum::<f64>() / rounds as f64;
    let slope = ols_slope(&per_round_means)?;
    let (lowess_curve, lowess_degenerate) = if rounds >= 3 && params.frac * rounds as f64 >= 2.0 {
        let l = lowess(&per_round_means, params)?;
        (l.fitted, l.degenerate)
    } else {
        // too short to smooth: the curve is the raw means
        (per_round_means.clone(), (0..rounds).collect())
    };
    let conversation_slopes =
        full.iter().map(|t| Ok((t.conversation_id.clone(), ols_slope(&t.scores)?))).collect::<Result<_, AnalysisError>>()?;
    Ok(GroupSummary {
        key,
        n,
        excluded,
        mean_score,
        slope,
        per_round_means,
        lowess_curve,
        lowess_degenerate,
        conversation_slopes,
    })
}

/// Group trajectories by key (optionally split by stratum) and summarize each group.
pub fn summarize_groups(
    trajectories: &[Trajectory],
    by_stratum: bool,
    params: &LowessParams,
) -> Result<BTreeMap<GroupKey, GroupSummary>, AnalysisError> {
    let mut groups: BTreeMap<GroupKey, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        if by_stratum && t.stratum.is_none() {
            continue;
        }
        groups.entry(t.key(by_stratum)).or_default().push(t);
    }
    groups
        .into_par_iter()
        .map(|(key, members)| group_summary(key.clone(), &members, params).map(|s| (key, s)))
        .collect()
}

/// Treatment-vs-control comparison for one (condition, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub condition: Condition,
    pub assistant_model: String,
    pub n_treatment: usize,
    pub n_control: usize,
    pub mean_treatment: f64,
    pub mean_control: f64,
    pub effect: EffectReport,
}

/// Welch comparison of conversation-level mean scores, treatment minus control,
/// per (condition, model). Cells that cannot be tested come back as errors
/// labelled with the cell name.
pub fn compare_cohorts(trajectories: &[Trajectory]) -> Vec<Result<CohortComparison, (String, AnalysisError)>> {
    let mut cells: BTreeMap<(Condition, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut ordered: Vec<&Trajectory> = trajectories.iter().filter(|t| !t.scores.is_empty()).collect();
    ordered.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
    for t in ordered {
        let cell = cells.entry((t.condition, t.assistant_model.clone())).or_default();
        let m = mean(&t.scores);
        match t.cohort {
            Cohort::Treatment => cell.0.push(m),
            Cohort::Control => cell.1.push(m),
            Cohort::Unassigned => {}
        }
    }
    cells
        .into_iter()
        .map(|((condition, model), (a, b))| {
            let label = format!("{}/{}", condition.as_str(), model);
            let effect = welch_t(&a, &b).map_err(|e| (label, e))?;
            Ok(CohortComparison {
                condition,
                assistant_model: model,
                n_treatment: a.len(),
                n_control: b.len(),
                mean_treatment: mean(&a),
                mean_control: mean(&b),
                effect,
            })
        })
        .collect()
}
