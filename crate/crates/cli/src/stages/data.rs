//! Corpus-side stages: ingest, cohorts, covariates and propensity matching.

use std::collections::BTreeMap;

use delusim_core::corpus::{build_cohorts, dedup_posts, ingest_posts, InputFormat};
use delusim_core::features::{covariate_names, user_covariates, Embedder, Lexicon};
use delusim_core::matching::{fit_propensity, standardize, sweep_and_select, SMD_BALANCE_THRESHOLD};
use delusim_core::{Cohort, CovariateVector, Post, UserRecord};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use super::{num, read_jsonl, write_csv, write_json, write_jsonl, Stage, StageCtx};
use crate::error::CliError;

pub const POSTS: &str = "posts.jsonl";
pub const USERS: &str = "users.jsonl";
pub const COVARIATES: &str = "covariates.jsonl";
pub const STRATA: &str = "strata.csv";
pub const BALANCE: &str = "balance.csv";
pub const BALANCE_SUMMARY: &str = "balance_summary.json";

#[derive(Serialize)]
struct IngestFile {
    path: String,
    posts: usize,
    skipped: usize,
}

pub fn ingest(ctx: &mut StageCtx) -> Result<(), CliError> {
    let mut posts: Vec<Post> = Vec::new();
    let mut files = Vec::new();
    for path in &ctx.cfg.corpus.paths {
        let got = ingest_posts(path, InputFormat::from_path(path))?;
        if got.skipped > 0 {
            ctx.warn(format!("{}: skipped {} malformed record(s)", path.display(), got.skipped));
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        files.push(IngestFile { path: name, posts: got.posts.len(), skipped: got.skipped });
        posts.extend(got.posts);
    }
    let duplicates = dedup_posts(&mut posts);
    if duplicates > 0 {
        ctx.warn(format!("dropped {duplicates} duplicate post id(s)"));
    }
    if posts.is_empty() {
        return Err(CliError::Analysis("the corpus holds no usable posts".into()));
    }
    write_jsonl(&ctx.out(POSTS), &posts)?;
    write_json(
        &ctx.out("summary.json"),
        &serde_json::json!({ "files": files, "duplicates_removed": duplicates, "posts": posts.len() }),
    )
}

pub fn cohorts(ctx: &mut StageCtx) -> Result<(), CliError> {
    let posts: Vec<Post> = read_jsonl(&ctx.upstream(Stage::Ingest, POSTS))?;
    let cohorts = build_cohorts(&posts, &ctx.cfg.cohorts)?;
    if cohorts.treatment.is_empty() || cohorts.control.is_empty() {
        return Err(CliError::Analysis(format!(
            "cohorts are unusable: {} treatment and {} control users",
            cohorts.treatment.len(),
            cohorts.control.len()
        )));
    }
    let mut users: Vec<&UserRecord> = cohorts.users().collect();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    write_jsonl(&ctx.out(USERS), &users)?;
    let rows: Vec<Vec<String>> =
        users.iter().map(|u| vec![u.user_id.clone(), u.cohort.as_str().to_string(), u.posts.len().to_string()]).collect();
    write_csv(&ctx.out("membership.csv"), &["user_id", "cohort", "posts"], &rows)?;
    write_json(
        &ctx.out("summary.json"),
        &serde_json::json!({ "treatment": cohorts.treatment.len(), "control": cohorts.control.len() }),
    )
}

pub fn covariates(ctx: &mut StageCtx) -> Result<(), CliError> {
    let users: Vec<UserRecord> = read_jsonl(&ctx.upstream(Stage::Cohorts, USERS))?;
    let lexicon = Lexicon::load(&ctx.cfg.lexicon.path)?;
    let embedder = Embedder::from_config(&ctx.cfg.embedding)?;
    let vectors: Vec<CovariateVector> =
        users.par_iter().map(|u| user_covariates(u, &lexicon, &embedder)).collect::<Result<_, _>>()?;
    let zero: Vec<&str> = vectors.iter().filter(|v| v.zero_embedding).map(|v| v.user_id.as_str()).collect();
    if !zero.is_empty() {
        ctx.warn(format!("{} user(s) have an all-zero pooled embedding: {}", zero.len(), zero.join(", ")));
    }
    let names = covariate_names(&lexicon, embedder.dimension());
    let records: Vec<serde_json::Value> = users
        .iter()
        .zip(&vectors)
        .map(|(u, v)| serde_json::json!({ "cohort": u.cohort, "covariates": v }))
        .collect();
    write_jsonl(&ctx.out(COVARIATES), &records)?;
    write_json(
        &ctx.out("summary.json"),
        &serde_json::json!({ "users": users.len(), "covariate_names": names, "provider": embedder.identity() }),
    )
}

#[derive(serde::Deserialize)]
struct CovariateRecord {
    cohort: Cohort,
    covariates: CovariateVector,
}

pub fn matching(ctx: &mut StageCtx) -> Result<(), CliError> {
    let records: Vec<CovariateRecord> = read_jsonl(&ctx.upstream(Stage::Covariates, COVARIATES))?;
    let summary: serde_json::Value = super::read_json(&ctx.upstream(Stage::Covariates, "summary.json"))?;
    let names: Vec<String> = serde_json::from_value(summary["covariate_names"].clone())
        .map_err(|e| CliError::Analysis(format!("covariate names: {e}")))?;
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.covariates.to_row()).collect();
    let width = names.len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(CliError::Analysis("covariate rows have inconsistent width".into()));
    }
    let matrix = Array2::from_shape_vec((rows.len(), width), rows.into_iter().flatten().collect())
        .map_err(|e| CliError::Analysis(e.to_string()))?;
    let ids: Vec<String> = records.iter().map(|r| r.covariates.user_id.clone()).collect();
    let treated: Vec<bool> = records.iter().map(|r| r.cohort == Cohort::Treatment).collect();

    let z = standardize(matrix.view())?;
    let model = fit_propensity(z.z.view(), &treated, &ctx.cfg.matching.logistic())?;
    if !model.converged {
        ctx.warn(format!("propensity model did not converge in {} iterations", model.iterations_used));
    }
    let scores = model.scores(z.z.view());
    let sweep = sweep_and_select(matrix.view(), &ids, &treated, &scores, &ctx.cfg.matching.sweep())?;
    for (k, why) in &sweep.skipped {
        ctx.warn(format!("k = {k} skipped: {why}"));
    }
    let (best, strat) = sweep.best();
    if !best.passes(SMD_BALANCE_THRESHOLD) {
        ctx.warn(format!(
            "best k = {} leaves mean |SMD| {:.3}, above the {SMD_BALANCE_THRESHOLD} balance gate",
            best.k, best.mean_abs_smd_after
        ));
    }

    write_json(&ctx.out("propensity.json"), &model)?;
    let strata_rows: Vec<Vec<String>> = (0..ids.len())
        .map(|i| {
            vec![
                ids[i].clone(),
                if treated[i] { "treatment" } else { "control" }.to_string(),
                num(scores[i]),
                strat.strata[i].to_string(),
                strat.is_active(strat.strata[i]).to_string(),
            ]
        })
        .collect();
    write_csv(&ctx.out(STRATA), &["user_id", "cohort", "propensity", "stratum", "active"], &strata_rows)?;

    let mut balance_rows = Vec::new();
    for r in &sweep.reports {
        for (j, name) in names.iter().enumerate() {
            balance_rows.push(vec![
                r.k.to_string(),
                name.clone(),
                num(r.per_covariate_smd_before[j]),
                num(r.per_covariate_smd_after[j]),
                num(r.per_covariate_smd_within[j]),
            ]);
        }
    }
    write_csv(&ctx.out(BALANCE), &["k", "covariate", "smd_before", "smd_after", "smd_within"], &balance_rows)?;

    let per_k: Vec<serde_json::Value> = sweep
        .reports
        .iter()
        .zip(&sweep.stratifications)
        .map(|(r, s)| {
            let sizes: Vec<[usize; 2]> = s.group_sizes().into_iter().map(|(t, c)| [t, c]).collect();
            serde_json::json!({
                "k": r.k,
                "mean_abs_smd_before": r.mean_abs_smd_before,
                "mean_abs_smd_after": r.mean_abs_smd_after,
                "mean_abs_smd_within": r.mean_abs_smd_within,
                "passes": r.passes(SMD_BALANCE_THRESHOLD),
                "strata_used": r.strata_used,
                "pruned": s.pruned,
                "group_sizes": sizes,
            })
        })
        .collect();
    let active: BTreeMap<&str, usize> = {
        let mut m = BTreeMap::new();
        for i in strat.active_users() {
            *m.entry(if treated[i] { "treatment" } else { "control" }).or_insert(0) += 1;
        }
        m
    };
    write_json(
        &ctx.out(BALANCE_SUMMARY),
        &serde_json::json!({
            "best_k": sweep.best_k,
            "threshold": SMD_BALANCE_THRESHOLD,
            "passes": best.passes(SMD_BALANCE_THRESHOLD),
            "mean_abs_smd_before": best.mean_abs_smd_before,
            "mean_abs_smd_after": best.mean_abs_smd_after,
            "matched_users": active,
            "skipped_k": sweep.skipped.iter().map(|(k, _)| k).collect::<Vec<_>>(),
            "per_k": per_k,
        }),
    )
}

/// Row of `match/strata.csv`.
#[derive(Debug, Clone, serde::Deserialize)]
pub struct StrataRow {
    pub user_id: String,
    pub cohort: String,
    pub stratum: usize,
    pub active: bool,
}

pub fn read_strata(ctx: &StageCtx) -> Result<Vec<StrataRow>, CliError> {
    let path = ctx.upstream(Stage::Match, STRATA);
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize().collect::<Result<_, _>>().map_err(CliError::from)
}
