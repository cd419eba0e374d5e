//! Stratified propensity-score matching.
//!
//! Covariates are standardized, a regularized logistic model estimates each
//! user's probability of being in the treatment cohort, users are cut into
//! `k` equal-mass strata on that score, and covariate balance is measured as
//! the stratum-size-weighted mean absolute standardized mean difference.
//! The `k` with the lowest balance score wins; strata too thin in either
//! group are pruned from downstream analysis.

pub mod logistic;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logistic::{fit_logistic, predict_proba, sigmoid, LogisticFit, LogisticParams};

/// Stand-in for an infinite SMD (zero variance in both groups, different means).
pub const SMD_SENTINEL: f64 = 1e3;

/// Mean absolute SMD below this counts as adequate balance.
pub const SMD_BALANCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("labels contain a single class; both treatment and control are required")]
    SingleClass,
    #[error("k = {0} outside the supported range 3..=10")]
    BadK(usize),
    #[error("{distinct} distinct scores cannot fill {k} strata")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("each group needs at least 2 values for an SMD (got {treat} and {control})")]
    GroupTooSmall { treat: usize, control: usize },
    #[error("every stratum has fewer than {0} users in some group")]
    AllPruned(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub z: Array2<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Columns with zero sample variance; mapped to all zeros.
    pub zero_variance: Vec<bool>,
}

/// Column-wise z-scores using the sample (n−1) standard deviation.
pub fn standardize(matrix: ArrayView2<f64>) -> Result<Standardized, MatchError> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(MatchError::TooFewRows { needed: 2, got: n });
    }
    let mut z = matrix.to_owned();
    let mut mean = Vec::with_capacity(matrix.ncols());
    let mut sd = Vec::with_capacity(matrix.ncols());
    let mut zero_variance = Vec::with_capacity(matrix.ncols());
    for mut col in z.axis_iter_mut(Axis(1)) {
        let m = col.sum() / n as f64;
        let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s = var.sqrt();
        let flat = s.is_nan() || s <= 1e-12 * m.abs().max(1.0);
        if flat {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|x| (x - m) / s);
        }
        mean.push(m);
        sd.push(s);
        zero_variance.push(flat);
    }
    Ok(Standardized { z, mean, sd, zero_variance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub iterations_used: usize,
    pub converged: bool,
}

impl PropensityModel {
    pub fn score(&self, row: &[f64]) -> f64 {
        predict_proba(&self.weights, self.bias, row)
    }

    pub fn scores(&self, z: ArrayView2<f64>) -> Vec<f64> {
        let w = Array1::from(self.weights.clone());
        (z.dot(&w) + self.bias).mapv(sigmoid).to_vec()
    }
}

pub fn fit_propensity(z: ArrayView2<f64>, treated: &[bool], params: &LogisticParams) -> Result<PropensityModel, MatchError> {
    if z.nrows() != treated.len() {
        return Err(MatchError::Shape(format!("{} rows, {} labels", z.nrows(), treated.len())));
    }
    if treated.iter().all(|&t| t) || treated.iter().all(|&t| !t) {
        return Err(MatchError::SingleClass);
    }
    let y: Array1<f64> = treated.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let fit = fit_logistic(z, y.view(), params);
    Ok(PropensityModel {
        weights: fit.weights,
        bias: fit.bias,
        l2_lambda: params.l2_lambda,
        max_iter: params.max_iter,
        iterations_used: fit.iterations_used,
        converged: fit.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub k: usize,
    /// k−1 ascending cut points; a score equal to a cut point goes to the lower stratum.
    pub boundaries: Vec<f64>,
    pub user_ids: Vec<String>,
    pub treated: Vec<bool>,
    pub scores: Vec<f64>,
    pub strata: Vec<usize>,
    pub pruned: BTreeSet<usize>,
}

impl Stratification {
    pub fn assignment(&self) -> BTreeMap<&str, usize> {
        self.user_ids.iter().map(String::as_str).zip(self.strata.iter().copied()).collect()
    }

    /// (treatment, control) counts per stratum.
    pub fn group_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(0, 0); self.k];
        for (&s, &t) in self.strata.iter().zip(&self.treated) {
            if t {
                sizes[s].0 += 1;
            } else {
                sizes[s].1 += 1;
            }
        }
        sizes
    }

    pub fn is_active(&self, stratum: usize) -> bool {
        !self.pruned.contains(&stratum)
    }

    /// Indices of users in strata that survived pruning.
    pub fn active_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.user_ids.len()).filter(|&i| self.is_active(self.strata[i]))
    }
}

/// Equal-mass strata: cut points at the i/k empirical quantiles of the pooled scores.
pub fn stratify(user_ids: &[String], treated: &[bool], scores: &[f64], k: usize) -> Result<Stratification, MatchError> {
    if !(3..=10).contains(&k) {
        return Err(MatchError::BadK(k));
    }
    if user_ids.len() != scores.len() || treated.len() != scores.len() {
        return Err(MatchError::Shape("user_ids, treated and scores must align".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(MatchError::TooFewDistinct { k, distinct: distinct.len() });
    }
    let n = sorted.len();
    // lower empirical quantile: the ceil(i n / k)-th order statistic
    let boundaries: Vec<f64> = (1..k).map(|i| sorted[(i * n).div_ceil(k) - 1]).collect();
    let strata = scores.iter().map(|&s| boundaries.iter().filter(|&&b| b < s).count()).collect();
    Ok(Stratification {
        k,
        boundaries,
        user_ids: user_ids.to_vec(),
        treated: treated.to_vec(),
        scores: scores.to_vec(),
        strata,
        pruned: BTreeSet::new(),
    })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// |mean_t − mean_c| / sqrt((var_t + var_c) / 2) with sample variances.
pub fn smd(treat: &[f64], control: &[f64]) -> Result<f64, MatchError> {
    if treat.len() < 2 || control.len() < 2 {
        return Err(MatchError::GroupTooSmall { treat: treat.len(), control: control.len() });
    }
    let (mt, vt) = mean_var(treat);
    let (mc, vc) = mean_var(control);
    let diff = (mt - mc).abs();
    let pooled = ((vt + vc) / 2.0).sqrt();
    let scale = mt.abs().max(mc.abs()).max(1.0);
    if pooled <= 1e-12 * scale {
        return Ok(if diff <= 1e-12 * scale { 0.0 } else { SMD_SENTINEL });
    }
    Ok(diff / pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub k: usize,
    pub per_covariate_smd_before: Vec<f64>,
    pub per_covariate_smd_after: Vec<f64>,
    pub mean_abs_smd_before: f64,
    pub mean_abs_smd_after: f64,
    /// Stratum-size-weighted mean of per-stratum absolute SMDs (diagnostic).
    pub per_covariate_smd_within: Vec<f64>,
    pub mean_abs_smd_within: f64,
    /// Strata that entered the matched averages.
    pub strata_used: Vec<usize>,
}

impl BalanceReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.mean_abs_smd_after < threshold
    }
}

fn column_groups(matrix: ArrayView2<f64>, rows: &[usize], treated: &[bool], col: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::new();
    let mut c = Vec::new();
    for &r in rows {
        let v = matrix[[r, col]];
        if treated[r] {
            t.push(v);
        } else {
            c.push(v);
        }
    }
    (t, c)
}

/// Balance before and after stratification.
///
/// The matched SMD of a covariate is the stratum-size-weighted average of
/// the within-stratum treated-minus-control mean differences, standardized
/// by the unmatched pooled SD, so before and after share one scale. The
/// average of per-stratum absolute SMDs (each on its own stratum's SD) is
/// kept as a diagnostic; it carries a sampling-noise floor that grows as
/// strata get smaller. Only active strata holding at least two users of
/// each group contribute.
pub fn balance(matrix: ArrayView2<f64>, strat: &Stratification) -> Result<BalanceReport, MatchError> {
    if matrix.nrows() != strat.user_ids.len() {
        return Err(MatchError::Shape(format!("{} rows vs {} stratified users", matrix.nrows(), strat.user_ids.len())));
    }
    let all: Vec<usize> = (0..matrix.nrows()).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); strat.k];
    for (i, &s) in strat.strata.iter().enumerate() {
        members[s].push(i);
    }
    let sizes = strat.group_sizes();
    let strata_used: Vec<usize> = (0..strat.k)
        .filter(|&s| strat.is_active(s) && sizes[s].0 >= 2 && sizes[s].1 >= 2)
        .collect();
    if strata_used.is_empty() {
        return Err(MatchError::AllPruned(2));
    }
    let total: f64 = strata_used.iter().map(|&s| members[s].len() as f64).sum();

    let mut before = Vec::with_capacity(matrix.ncols());
    let mut after = Vec::with_capacity(matrix.ncols());
    let mut within = Vec::with_capacity(matrix.ncols());
    for col in 0..matrix.ncols() {
        let (t, c) = column_groups(matrix, &all, &strat.treated, col);
        before.push(smd(&t, &c)?);
        let (_, vt) = mean_var(&t);
        let (_, vc) = mean_var(&c);
        let pooled = ((vt + vc) / 2.0).sqrt();

        let mut diff = 0.0;
        let mut within_sum = 0.0;
        let mut scale = 1.0f64;
        for &s in &strata_used {
            let (t, c) = column_groups(matrix, &members[s], &strat.treated, col);
            let (mt, _) = mean_var(&t);
            let (mc, _) = mean_var(&c);
            scale = scale.max(mt.abs()).max(mc.abs());
            let w = members[s].len() as f64 / total;
            diff += w * (mt - mc);
            within_sum += w * smd(&t, &c)?;
        }
        let diff = diff.abs();
        after.push(if pooled <= 1e-12 * scale {
            if diff <= 1e-12 * scale { 0.0 } else { SMD_SENTINEL }
        } else {
            diff / pooled
        });
        within.push(within_sum);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(BalanceReport {
        k: strat.k,
        mean_abs_smd_before: mean(&before),
        mean_abs_smd_after: mean(&after),
        mean_abs_smd_within: mean(&within),
        per_covariate_smd_before: before,
        per_covariate_smd_after: after,
        per_covariate_smd_within: within,
        strata_used,
    })
}

/// Mark strata with fewer than `min_per_group` users in either group as pruned.
pub fn prune_strata(strat: &Stratification, min_per_group: usize) -> Result<Stratification, MatchError> {
    let mut out = strat.clone();
    for (s, (t, c)) in strat.group_sizes().into_iter().enumerate() {
        if t < min_per_group || c < min_per_group {
            out.pruned.insert(s);
        }
    }
    if out.pruned.len() == out.k {
        return Err(MatchError::AllPruned(min_per_group));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub k_min: usize,
    pub k_max: usize,
    /// Strata thinner than this in either group are pruned before scoring balance.
    pub min_per_group: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams { k_min: 3, k_max: 10, min_per_group: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub best_k: usize,
    pub reports: Vec<BalanceReport>,
    /// Pruned stratification for every k, aligned with `reports`.
    pub stratifications: Vec<Stratification>,
    /// k values left out because pruning emptied every stratum, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl Sweep {
    pub fn best(&self) -> (&BalanceReport, &Stratification) {
        let i = self.reports.iter().position(|r| r.k == self.best_k).expect("best k was swept");
        (&self.reports[i], &self.stratifications[i])
    }
}

/// Stratify at every k in range, prune, score balance, and pick the k with the
/// lowest matched mean |SMD| (ties to the smaller k). `matrix` is the
/// covariate matrix balance is measured on. A k at which pruning leaves no
/// usable stratum is skipped; the sweep fails only if every k is skipped.
pub fn sweep_and_select(
    matrix: ArrayView2<f64>,
    user_ids: &[String],
    treated: &[bool],
    scores: &[f64],
    params: &SweepParams,
) -> Result<Sweep, MatchError> {
    let ks: Vec<usize> = (params.k_min..=params.k_max).collect();
    if ks.is_empty() {
        return Err(MatchError::BadK(params.k_min));
    }
    let results: Vec<Result<(BalanceReport, Stratification), MatchError>> = ks
        .par_iter()
        .map(|&k| {
            let strat = stratify(user_ids, treated, scores, k)?;
            let strat = prune_strata(&strat, params.min_per_group)?;
            Ok((balance(matrix, &strat)?, strat))
        })
        .collect();
    let mut reports = Vec::with_capacity(ks.len());
    let mut stratifications = Vec::with_capacity(ks.len());
    let mut skipped = Vec::new();
    let mut last_pruned = None;
    for (k, r) in ks.iter().zip(results) {
        match r {
            Ok((rep, strat)) => {
                reports.push(rep);
                stratifications.push(strat);
            }
            Err(e @ MatchError::AllPruned(_)) => {
                skipped.push((*k, e.to_string()));
                last_pruned = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() {
        return Err(last_pruned.expect("every k was skipped"));
    }
    let best_k = reports
        .iter()
        .fold(None::<&BalanceReport>, |best, r| match best {
            Some(b) if b.mean_abs_smd_after <= r.mean_abs_smd_after => Some(b),
            _ => Some(r),
        })
        .map(|r| r.k)
        .expect("non-empty sweep");
    Ok(Sweep { best_k, reports, stratifications, skipped })
}
