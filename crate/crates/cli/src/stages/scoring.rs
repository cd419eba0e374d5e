//! DelusionScore stages: train the classifier, evaluate it on the held-out
//! split, and score every SimUser turn of the simulated transcripts.

use delusim_core::features::Embedder;
use delusim_core::matching::LogisticParams;
use delusim_core::scorer::{evaluate_scorer, load_labeled, split_corpus, train_scorer, Scorer, ScorerParams};
use delusim_core::simulate::score_transcripts;
use delusim_core::{LabeledPost, ScorerModel, Speaker, Transcript, TranscriptStatus};

use super::{num, read_jsonl, write_csv, write_json, write_jsonl, Stage, StageCtx};
use crate::error::CliError;

pub const MODEL: &str = "model.json";
pub const TEST_SPLIT: &str = "test_split.jsonl";
pub const METRICS: &str = "metrics.json";
pub const SCORED: &str = "scored.jsonl";

pub fn train(ctx: &mut StageCtx) -> Result<(), CliError> {
    let s = &ctx.cfg.scorer;
    let corpus = load_labeled(&s.labeled_path)?;
    let params = ScorerParams {
        logistic: LogisticParams { l2_lambda: s.l2_lambda, max_iter: s.max_iter, tol: s.tol },
        seed: ctx.cfg.seed_for("scorer"),
        test_fraction: s.test_fraction,
    };
    let (train, test) = split_corpus(&corpus, params.test_fraction, params.seed)?;
    let embedder = Embedder::from_config(&ctx.cfg.embedding)?;
    let model = train_scorer(&train, &embedder, &params)?;
    if !model.train_metadata.converged {
        ctx.warn(format!("scorer did not converge in {} iterations", model.train_metadata.iterations_used));
    }
    model.save(&ctx.out(MODEL))?;
    write_jsonl(&ctx.out(TEST_SPLIT), &test)?;
    write_json(&ctx.out("summary.json"), &serde_json::json!({ "n_train": train.len(), "n_test": test.len() }))
}

pub fn evaluate(ctx: &mut StageCtx) -> Result<(), CliError> {
    let model = ScorerModel::load(&ctx.upstream(Stage::TrainScorer, MODEL))?;
    let test: Vec<LabeledPost> = read_jsonl(&ctx.upstream(Stage::TrainScorer, TEST_SPLIT))?;
    let embedder = Embedder::from_config(&ctx.cfg.embedding)?;
    let m = evaluate_scorer(&model, &embedder, &test, ctx.cfg.scorer.threshold)?;
    write_json(&ctx.out(METRICS), &m)?;
    let [[tn, fp], [fneg, tp]] = m.confusion;
    let rows = vec![
        vec!["threshold".to_string(), num(m.threshold)],
        vec!["balanced_accuracy".to_string(), num(m.balanced_accuracy)],
        vec!["f1".to_string(), num(m.f1)],
        vec!["precision".to_string(), num(m.precision)],
        vec!["recall".to_string(), num(m.recall)],
        vec!["true_negative".to_string(), tn.to_string()],
        vec!["false_positive".to_string(), fp.to_string()],
        vec!["false_negative".to_string(), fneg.to_string()],
        vec!["true_positive".to_string(), tp.to_string()],
    ];
    write_csv(&ctx.out("metrics.csv"), &["metric", "value"], &rows)
}

/// Transcripts of the simulate stage, in conversation-id order.
pub fn load_transcripts(ctx: &StageCtx) -> Result<Vec<Transcript>, CliError> {
    let dir = ctx.upstream(Stage::Simulate, super::simulation::TRANSCRIPT_DIR);
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(CliError::io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out: Vec<Transcript> = paths.iter().map(|p| Transcript::load(p)).collect::<Result<_, _>>()?;
    out.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
    Ok(out)
}

pub fn score(ctx: &mut StageCtx) -> Result<(), CliError> {
    let model = ScorerModel::load(&ctx.upstream(Stage::TrainScorer, MODEL))?;
    let embedder = Embedder::from_config(&ctx.cfg.embedding)?;
    let scorer = Scorer::new(&model, &embedder)?;
    let mut transcripts = load_transcripts(ctx)?;
    let scored = score_transcripts(&mut transcripts, &scorer)?;
    let incomplete = transcripts.iter().filter(|t| t.status != TranscriptStatus::Complete).count();
    if incomplete > 0 {
        ctx.warn(format!("{incomplete} transcript(s) are not Complete and are left out of trajectory statistics"));
    }
    write_jsonl(&ctx.out(SCORED), &transcripts)?;
    let mut rows = Vec::new();
    for t in &transcripts {
        for (round, turn) in t.turns.iter().filter(|u| u.speaker == Speaker::SimUser).enumerate() {
            rows.push(vec![
                t.conversation_id.clone(),
                t.user_id.clone(),
                t.cohort.as_str().to_string(),
                t.stratum.map(|s| s.to_string()).unwrap_or_default(),
                t.condition.as_str().to_string(),
                t.assistant_model.clone(),
                round.to_string(),
                super::opt_num(turn.score),
            ]);
        }
    }
    write_csv(
        &ctx.out("turn_scores.csv"),
        &["conversation_id", "user_id", "cohort", "stratum", "condition", "assistant_model", "round", "score"],
        &rows,
    )?;
    write_json(
        &ctx.out("summary.json"),
        &serde_json::json!({ "transcripts": transcripts.len(), "newly_scored_turns": scored, "incomplete": incomplete }),
    )
}
