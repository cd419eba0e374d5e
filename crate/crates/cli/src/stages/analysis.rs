//! Trajectory statistics, fidelity evaluation and theme extraction over the
//! scored transcripts.

use std::collections::BTreeMap;

use delusim_core::analysis::{compare_cohorts, fidelity_eval, summarize_groups, CohortComparison, FidelityInput, FidelityReport};
use delusim_core::features::{Embedder, Lexicon};
use delusim_core::themes::{select_k, theme_trends, ThemedTurn, TrendCell};
use delusim_core::{Condition, GroupSummary, Speaker, Trajectory, Transcript, TranscriptStatus, UserRecord};
use serde::{Deserialize, Serialize};

use super::data::USERS;
use super::scoring::SCORED;
use super::{num, opt_num, read_json, read_jsonl, write_csv, write_json, Stage, StageCtx};
use crate::error::CliError;

pub const ANALYSIS: &str = "analysis.json";
pub const THEMES: &str = "themes.json";

/// Everything `report` needs from `analyze`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub groups: Vec<GroupSummary>,
    pub strata_groups: Vec<GroupSummary>,
    pub comparisons: Vec<CohortComparison>,
    pub fidelity: FidelityReport,
    pub flags: Vec<String>,
}

fn stratum_cell(s: Option<usize>) -> String {
    s.map(|s| s.to_string()).unwrap_or_default()
}

pub fn analyze(ctx: &mut StageCtx) -> Result<(), CliError> {
    let transcripts: Vec<Transcript> = read_jsonl(&ctx.upstream(Stage::Score, SCORED))?;
    let trajectories: Vec<Trajectory> = transcripts.iter().filter_map(Trajectory::from_transcript).collect();
    let excluded = transcripts.len() - trajectories.len();
    if excluded > 0 {
        ctx.warn(format!("{excluded} transcript(s) not Complete or not fully scored; excluded from trajectories"));
    }
    if trajectories.is_empty() {
        return Err(CliError::Analysis("no complete, scored trajectory to analyze".into()));
    }
    let lowess = ctx.cfg.analysis.lowess();
    let groups: Vec<GroupSummary> = summarize_groups(&trajectories, false, &lowess)?.into_values().collect();
    let strata_groups: Vec<GroupSummary> = summarize_groups(&trajectories, true, &lowess)?.into_values().collect();
    for g in groups.iter().chain(&strata_groups).filter(|g| g.excluded > 0) {
        ctx.warn(format!("{}: {} short trajectories excluded", g.key, g.excluded));
    }
    let mut comparisons = Vec::new();
    let mut flags = Vec::new();
    for r in compare_cohorts(&trajectories) {
        match r {
            Ok(c) => comparisons.push(c),
            Err((cell, e)) => flags.push(format!("{cell}: cohort comparison skipped: {e}")),
        }
    }

    // fidelity: each user's SimUser turns in the Standard condition against their own posts
    let users: Vec<UserRecord> = read_jsonl(&ctx.upstream(Stage::Cohorts, USERS))?;
    let posts: BTreeMap<&str, Vec<String>> =
        users.iter().map(|u| (u.user_id.as_str(), u.posts.iter().map(|p| p.body.clone()).collect())).collect();
    let mut generated: BTreeMap<(String, usize), Vec<String>> = BTreeMap::new();
    for t in transcripts.iter().filter(|t| t.condition == Condition::Standard && t.status == TranscriptStatus::Complete) {
        let Some(stratum) = t.stratum else { continue };
        let texts = generated.entry((t.user_id.clone(), stratum)).or_default();
        texts.extend(t.turns.iter().filter(|u| u.speaker == Speaker::SimUser).map(|u| u.text.clone()));
    }
    let inputs: Vec<FidelityInput> = generated
        .into_iter()
        .filter_map(|((user_id, stratum), gen)| {
            let own = posts.get(user_id.as_str())?.clone();
            Some(FidelityInput { user_id, stratum, generated: gen, own_posts: own })
        })
        .collect();
    let lexicon = Lexicon::load(&ctx.cfg.lexicon.path)?;
    let fidelity = fidelity_eval(&inputs, &lexicon, ctx.cfg.seed_for("fidelity"));
    flags.extend(fidelity.flags.iter().map(|f| format!("fidelity: {f}")));
    for f in &flags {
        ctx.warn(f.clone());
    }

    let group_row = |g: &GroupSummary| {
        vec![
            g.key.cohort.as_str().to_string(),
            g.key.condition.as_str().to_string(),
            g.key.assistant_model.clone(),
            stratum_cell(g.key.stratum),
            g.n.to_string(),
            g.excluded.to_string(),
            num(g.mean_score),
            num(g.slope),
        ]
    };
    let rows: Vec<Vec<String>> = groups.iter().chain(&strata_groups).map(group_row).collect();
    write_csv(
        &ctx.out("group_summaries.csv"),
        &["cohort", "condition", "assistant_model", "stratum", "n", "excluded", "mean_score", "slope"],
        &rows,
    )?;

    let mut rows = Vec::new();
    for g in groups.iter().chain(&strata_groups) {
        for (r, (m, l)) in g.per_round_means.iter().zip(&g.lowess_curve).enumerate() {
            rows.push(vec![
                g.key.cohort.as_str().to_string(),
                g.key.condition.as_str().to_string(),
                g.key.assistant_model.clone(),
                stratum_cell(g.key.stratum),
                r.to_string(),
                num(*m),
                num(*l),
            ]);
        }
    }
    write_csv(
        &ctx.out("per_round_means.csv"),
        &["cohort", "condition", "assistant_model", "stratum", "round", "mean", "lowess"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = comparisons
        .iter()
        .map(|c| {
            vec![
                c.condition.as_str().to_string(),
                c.assistant_model.clone(),
                c.n_treatment.to_string(),
                c.n_control.to_string(),
                num(c.mean_treatment),
                num(c.mean_control),
                num(c.effect.cohens_d),
                num(c.effect.t_statistic),
                num(c.effect.degrees_of_freedom),
                num(c.effect.p_value),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("effects.csv"),
        &["condition", "assistant_model", "n_treatment", "n_control", "mean_treatment", "mean_control", "cohens_d", "t", "df", "p_value"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = fidelity
        .rows
        .iter()
        .map(|r| {
            vec![
                r.stratum.to_string(),
                r.n_users.to_string(),
                num(r.s_actual),
                num(r.s_random),
                num(r.pct_diff),
                num(r.cohens_d),
                num(r.paired_t),
                num(r.df),
                num(r.p_value),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("fidelity.csv"),
        &["stratum", "n_users", "s_actual", "s_random", "pct_diff", "cohens_d", "t", "df", "p_value"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = fidelity
        .users
        .iter()
        .map(|u| vec![u.user_id.clone(), u.stratum.to_string(), u.random_partner.clone(), num(u.r_actual), num(u.r_random)])
        .collect();
    write_csv(&ctx.out("fidelity_users.csv"), &["user_id", "stratum", "random_partner", "r_actual", "r_random"], &rows)?;

    let mut rows = Vec::new();
    for g in &groups {
        for (id, slope) in &g.conversation_slopes {
            rows.push(vec![
                id.clone(),
                g.key.cohort.as_str().to_string(),
                g.key.condition.as_str().to_string(),
                g.key.assistant_model.clone(),
                num(*slope),
            ]);
        }
    }
    write_csv(&ctx.out("conversation_slopes.csv"), &["conversation_id", "cohort", "condition", "assistant_model", "slope"], &rows)?;

    write_json(&ctx.out(ANALYSIS), &AnalysisOutput { groups, strata_groups, comparisons, fidelity, flags })
}

/// Everything `report` needs from `themes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThemesOutput {
    pub per_k: BTreeMap<usize, f64>,
    pub selected_k: usize,
    pub sizes: Vec<usize>,
    pub keywords: Vec<Vec<String>>,
    pub labels: BTreeMap<usize, String>,
    pub trends: Vec<TrendOut>,
    pub flags: Vec<String>,
}

/// A theme's slopes as a list, since JSON map keys must be strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendOut {
    pub theme: usize,
    pub slopes: Vec<(TrendCell, Option<f64>)>,
}

pub fn themes(ctx: &mut StageCtx) -> Result<(), CliError> {
    let transcripts: Vec<Transcript> = read_jsonl(&ctx.upstream(Stage::Score, SCORED))?;
    // SimUser turns of complete transcripts, in conversation then round order
    let mut meta = Vec::new();
    let mut texts = Vec::new();
    for t in transcripts.iter().filter(|t| t.status == TranscriptStatus::Complete) {
        for (round, turn) in t.turns.iter().filter(|u| u.speaker == Speaker::SimUser).enumerate() {
            let Some(score) = turn.score else { continue };
            meta.push((t, round, score));
            texts.push(turn.text.as_str());
        }
    }
    if texts.is_empty() {
        return Err(CliError::Analysis("no scored SimUser turn to cluster".into()));
    }
    let mut params = ctx.cfg.themes.params();
    if params.k_max > texts.len() {
        ctx.warn(format!("themes.k_max {} exceeds the {} turns; capped", params.k_max, texts.len()));
        params.k_max = texts.len();
        params.k_min = params.k_min.min(params.k_max);
    }
    let embedder = Embedder::from_config(&ctx.cfg.embedding)?;
    let embeddings = embedder.embed(&texts)?;
    let (coherence, model) = select_k(&embeddings, &texts, &params, ctx.cfg.seed_for("themes"))?;
    let turns: Vec<ThemedTurn> = meta
        .iter()
        .zip(&model.assignment)
        .map(|(&(t, round, score), &theme)| ThemedTurn {
            theme,
            cohort: t.cohort,
            condition: t.condition,
            assistant_model: t.assistant_model.clone(),
            round,
            score,
        })
        .collect();
    let trends = theme_trends(&turns, &model);
    let labels: BTreeMap<usize, String> = match &ctx.cfg.themes.labels_path {
        Some(p) => {
            let raw: BTreeMap<String, String> = read_json(p).map_err(|e| CliError::Config(format!("theme labels: {e}")))?;
            raw.into_iter().filter_map(|(k, v)| k.parse().ok().map(|k| (k, v))).collect()
        }
        None => BTreeMap::new(),
    };
    let mut flags = coherence.flags.clone();
    flags.extend(trends.iter().flat_map(|t| t.flags.iter().map(move |f| format!("theme {}: {f}", t.theme))));
    let keywords: Vec<Vec<String>> = model.keywords.iter().map(|kw| kw.iter().map(|w| w.term.clone()).collect()).collect();
    let sizes = model.sizes();

    let rows: Vec<Vec<String>> = (0..model.k)
        .map(|i| vec![i.to_string(), keywords[i].join(" "), sizes[i].to_string(), labels.get(&i).cloned().unwrap_or_default()])
        .collect();
    write_csv(&ctx.out("themes.csv"), &["theme", "keywords", "size", "label"], &rows)?;
    let rows: Vec<Vec<String>> = coherence
        .per_k
        .iter()
        .map(|(k, cv)| vec![k.to_string(), num(*cv), (*k == coherence.selected_k).to_string()])
        .collect();
    write_csv(&ctx.out("coherence.csv"), &["k", "c_v", "selected"], &rows)?;
    let mut rows = Vec::new();
    for t in &trends {
        for (cell, slope) in &t.slopes {
            rows.push(vec![
                t.theme.to_string(),
                cell.assistant_model.clone(),
                cell.condition.as_str().to_string(),
                cell.cohort.as_str().to_string(),
                opt_num(*slope),
            ]);
        }
    }
    write_csv(&ctx.out("theme_trends.csv"), &["theme", "assistant_model", "condition", "cohort", "slope"], &rows)?;
    let rows: Vec<Vec<String>> = meta
        .iter()
        .zip(&model.assignment)
        .map(|(&(t, round, _), &theme)| vec![t.conversation_id.clone(), round.to_string(), theme.to_string()])
        .collect();
    write_csv(&ctx.out("turn_themes.csv"), &["conversation_id", "round", "theme"], &rows)?;
    write_json(&ctx.out("model.json"), &model)?;
    write_json(
        &ctx.out(THEMES),
        &ThemesOutput {
            per_k: coherence.per_k,
            selected_k: coherence.selected_k,
            sizes,
            keywords,
            labels,
            trends: trends.into_iter().map(|t| TrendOut { theme: t.theme, slopes: t.slopes.into_iter().collect() }).collect(),
            flags,
        },
    )
}
