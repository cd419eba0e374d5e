//! Report rendering: table-shaped CSVs and SVG figures assembled from the
//! outputs of the analysis stages.

use std::collections::{BTreeMap, BTreeSet};

use delusim_core::scorer::EvalMetrics;
use delusim_core::simulate::file_stem;
use delusim_core::{Cohort, Condition, GroupSummary};

use super::analysis::{AnalysisOutput, ThemesOutput, ANALYSIS, THEMES};
use super::data::BALANCE_SUMMARY;
use super::scoring::METRICS;
use super::{num, opt_num, read_json, write_csv, write_json, Stage, StageCtx};
use crate::error::CliError;
use crate::svg::{Chart, Panel, Series, CONTROL_COLOR, NEUTRAL_COLOR, TREATMENT_COLOR};

fn cohort_color(c: Cohort) -> &'static str {
    match c {
        Cohort::Treatment => TREATMENT_COLOR,
        _ => CONTROL_COLOR,
    }
}

/// Raw per-round means (dashed, with markers) and the LOWESS curve (solid) of one group.
fn group_series(g: &GroupSummary) -> Vec<Series> {
    let color = cohort_color(g.key.cohort);
    let pts = |v: &[f64]| v.iter().enumerate().map(|(r, y)| (r as f64, *y)).collect();
    vec![
        Series { label: format!("{} mean", g.key.cohort.as_str()), points: pts(&g.per_round_means), color, dashed: true, markers: true },
        Series { label: format!("{} LOWESS", g.key.cohort.as_str()), points: pts(&g.lowess_curve), color, dashed: false, markers: false },
    ]
}

pub fn report(ctx: &mut StageCtx) -> Result<(), CliError> {
    let analysis: AnalysisOutput = read_json(&ctx.upstream(Stage::Analyze, ANALYSIS))?;
    let themes: ThemesOutput = read_json(&ctx.upstream(Stage::Themes, THEMES))?;
    let balance: serde_json::Value = read_json(&ctx.upstream(Stage::Match, BALANCE_SUMMARY))?;
    let metrics: EvalMetrics = read_json(&ctx.upstream(Stage::EvalScorer, METRICS))?;

    // Table 1: persona fidelity per stratum
    let rows: Vec<Vec<String>> = analysis
        .fidelity
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
                num(r.p_value),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("table1_fidelity.csv"),
        &["stratum", "n_users", "s_actual", "s_random", "pct_diff", "cohens_d", "t", "p_value"],
        &rows,
    )?;

    // Table 2: per model and condition, level and slope by cohort plus the effect
    let slope_of: BTreeMap<(Cohort, Condition, &str), &GroupSummary> =
        analysis.groups.iter().map(|g| ((g.key.cohort, g.key.condition, g.key.assistant_model.as_str()), g)).collect();
    let rows: Vec<Vec<String>> = analysis
        .comparisons
        .iter()
        .map(|c| {
            let slope = |cohort| opt_num(slope_of.get(&(cohort, c.condition, c.assistant_model.as_str())).map(|g| g.slope));
            vec![
                c.assistant_model.clone(),
                c.condition.as_str().to_string(),
                c.n_treatment.to_string(),
                c.n_control.to_string(),
                num(c.mean_treatment),
                num(c.mean_control),
                slope(Cohort::Treatment),
                slope(Cohort::Control),
                num(c.effect.cohens_d),
                num(c.effect.t_statistic),
                num(c.effect.degrees_of_freedom),
                num(c.effect.p_value),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("table2_trajectories.csv"),
        &[
            "assistant_model",
            "condition",
            "n_treatment",
            "n_control",
            "mean_treatment",
            "mean_control",
            "slope_treatment",
            "slope_control",
            "cohens_d",
            "t",
            "df",
            "p_value",
        ],
        &rows,
    )?;

    // Table 3: theme × (model, condition, cohort) slope grid
    let cells: BTreeSet<String> = themes
        .trends
        .iter()
        .flat_map(|t| t.slopes.iter().map(|(c, _)| format!("{}/{}/{}", c.assistant_model, c.condition.as_str(), c.cohort.as_str())))
        .collect();
    let mut header: Vec<String> = vec!["theme".into(), "label".into(), "keywords".into(), "size".into()];
    header.extend(cells.iter().cloned());
    let rows: Vec<Vec<String>> = themes
        .trends
        .iter()
        .map(|t| {
            let by_cell: BTreeMap<String, Option<f64>> = t
                .slopes
                .iter()
                .map(|(c, s)| (format!("{}/{}/{}", c.assistant_model, c.condition.as_str(), c.cohort.as_str()), *s))
                .collect();
            let mut row = vec![
                t.theme.to_string(),
                themes.labels.get(&t.theme).cloned().unwrap_or_default(),
                themes.keywords.get(t.theme).map(|k| k.iter().take(5).cloned().collect::<Vec<_>>().join(" ")).unwrap_or_default(),
                themes.sizes.get(t.theme).map(|s| s.to_string()).unwrap_or_default(),
            ];
            row.extend(cells.iter().map(|c| opt_num(by_cell.get(c).copied().flatten())));
            row
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&ctx.out("table3_theme_trends.csv"), &header_ref, &rows)?;

    // balance per k
    let best_k = balance["best_k"].as_u64().unwrap_or(0);
    let rows: Vec<Vec<String>> = balance["per_k"]
        .as_array()
        .map(|a| a.as_slice())
        .unwrap_or_default()
        .iter()
        .map(|r| {
            let f = |key: &str| r[key].as_f64().map(num).unwrap_or_default();
            vec![
                r["k"].to_string(),
                f("mean_abs_smd_before"),
                f("mean_abs_smd_after"),
                f("mean_abs_smd_within"),
                r["passes"].to_string(),
                (r["k"].as_u64() == Some(best_k)).to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("balance.csv"),
        &["k", "mean_abs_smd_before", "mean_abs_smd_after", "mean_abs_smd_within", "passes", "selected"],
        &rows,
    )?;

    // figures: one trajectory chart per (model, condition), plus per-stratum small multiples
    let mut cells: BTreeMap<(String, Condition), Vec<&GroupSummary>> = BTreeMap::new();
    for g in &analysis.groups {
        cells.entry((g.key.assistant_model.clone(), g.key.condition)).or_default().push(g);
    }
    let mut figures = Vec::new();
    for ((model, condition), groups) in &cells {
        let series = groups.iter().flat_map(|g| group_series(g)).collect();
        let chart = Chart {
            title: format!("DelusionScore by round: {model}, {} condition", condition.as_str()),
            x_label: "round".into(),
            y_label: "mean DelusionScore".into(),
            y_range: Some((0.0, 1.0)),
            panels: vec![Panel { title: "all matched users".into(), series }],
            columns: 1,
        };
        let name = format!("figure2_{}_{}.svg", file_stem(model), condition.as_str());
        std::fs::write(ctx.out(&name), chart.render()).map_err(CliError::io(ctx.out(&name)))?;
        figures.push(name);

        let mut by_stratum: BTreeMap<usize, Vec<&GroupSummary>> = BTreeMap::new();
        for g in analysis.strata_groups.iter().filter(|g| &g.key.assistant_model == model && g.key.condition == *condition) {
            if let Some(s) = g.key.stratum {
                by_stratum.entry(s).or_default().push(g);
            }
        }
        if !by_stratum.is_empty() {
            let panels = by_stratum
                .iter()
                .map(|(s, gs)| Panel { title: format!("stratum {s}"), series: gs.iter().flat_map(|g| group_series(g)).collect() })
                .collect();
            let chart = Chart {
                title: format!("DelusionScore by round and propensity stratum: {model}, {} condition", condition.as_str()),
                x_label: "round".into(),
                y_label: "mean DelusionScore".into(),
                y_range: Some((0.0, 1.0)),
                panels,
                columns: 3,
            };
            let name = format!("figure2_strata_{}_{}.svg", file_stem(model), condition.as_str());
            std::fs::write(ctx.out(&name), chart.render()).map_err(CliError::io(ctx.out(&name)))?;
            figures.push(name);
        }
    }
    let coherence = Chart {
        title: format!("Theme coherence (c_v) by number of themes; selected k = {}", themes.selected_k),
        x_label: "k".into(),
        y_label: "c_v".into(),
        y_range: None,
        panels: vec![Panel {
            title: "coherence".into(),
            series: vec![Series {
                label: "c_v".into(),
                points: themes.per_k.iter().map(|(k, v)| (*k as f64, *v)).collect(),
                color: NEUTRAL_COLOR,
                dashed: false,
                markers: true,
            }],
        }],
        columns: 1,
    };
    std::fs::write(ctx.out("coherence.svg"), coherence.render()).map_err(CliError::io(ctx.out("coherence.svg")))?;
    figures.push("coherence.svg".into());

    write_json(
        &ctx.out("summary.json"),
        &serde_json::json!({
            "balance": {
                "best_k": best_k,
                "mean_abs_smd_before": balance["mean_abs_smd_before"],
                "mean_abs_smd_after": balance["mean_abs_smd_after"],
                "passes": balance["passes"],
            },
            "scorer": metrics,
            "selected_themes": themes.selected_k,
            "figures": figures,
            "flags": analysis.flags.iter().chain(&themes.flags).collect::<Vec<_>>(),
        }),
    )
}
