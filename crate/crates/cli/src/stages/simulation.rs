//! The simulate stage: one conversation per matched user × assistant model ×
//! condition × repetition, run concurrently and resumable.

use std::collections::{BTreeMap, BTreeSet};

use delusim_core::features::Embedder;
use delusim_core::scorer::Scorer;
use delusim_core::simulate::{
    build_persona, file_stem, run_batch, seed_post, ChatClient, ConversationJob, MockRole, SimulationSettings, SimulateError,
};
use delusim_core::{ScorerModel, Transcript, TranscriptStatus, UserRecord};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{read_strata, USERS};
use super::{read_jsonl, write_json, Stage, StageCtx};
use crate::error::CliError;

pub const TRANSCRIPT_DIR: &str = "transcripts";

/// Conversation id: user, model, condition and repetition joined by `__`.
pub fn conversation_id(user: &str, model: &str, condition: &str, rep: usize) -> String {
    format!("{user}__{model}__{condition}__{rep}")
}

pub fn simulate(ctx: &mut StageCtx) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let sim = &cfg.simulate;
    let users: Vec<UserRecord> = read_jsonl(&ctx.upstream(Stage::Cohorts, USERS))?;
    let by_id: BTreeMap<&str, &UserRecord> = users.iter().map(|u| (u.user_id.as_str(), u)).collect();

    // matched sample: users in active strata of the selected k
    let strata = read_strata(ctx)?;
    let mut treatment: Vec<(String, usize)> = Vec::new();
    let mut control: Vec<(String, usize)> = Vec::new();
    for row in strata.iter().filter(|r| r.active) {
        match row.cohort.as_str() {
            "treatment" => treatment.push((row.user_id.clone(), row.stratum)),
            _ => control.push((row.user_id.clone(), row.stratum)),
        }
    }
    if let Some(cap) = sim.max_users_per_cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("simulate"));
        for group in [&mut treatment, &mut control] {
            group.sort();
            group.shuffle(&mut rng);
            group.truncate(cap);
        }
    }
    let mut sample: Vec<(String, usize)> = treatment.into_iter().chain(control).collect();
    sample.sort();

    let conditions = sim.conditions();
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for (user_id, stratum) in &sample {
        let Some(user) = by_id.get(user_id.as_str()) else {
            return Err(CliError::Analysis(format!("matched user {user_id} is missing from the cohorts")));
        };
        for rep in 0..sim.conversations_per_user {
            let seed = cfg.seed_for(&format!("persona/{user_id}/{rep}"));
            let persona = match build_persona(user, sim.exemplars, seed) {
                Ok(p) => p,
                Err(e @ SimulateError::TooFewPosts { .. }) => {
                    skipped.push(format!("{user_id}: {e}"));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let seed_text = match seed_post(user, &persona) {
                Ok(s) => s,
                Err(e) => {
                    skipped.push(format!("{user_id}: {e}"));
                    continue;
                }
            };
            for assistant in &sim.assistants {
                for &condition in &conditions {
                    jobs.push(ConversationJob {
                        conversation_id: conversation_id(user_id, &assistant.model_name, condition.as_str(), rep),
                        persona: persona.clone(),
                        seed_post: seed_text.clone(),
                        cohort: user.cohort,
                        stratum: Some(*stratum),
                        condition,
                        assistant_model: assistant.model_name.clone(),
                    });
                }
            }
        }
    }
    for s in &skipped {
        ctx.warn(format!("user skipped: {s}"));
    }
    if jobs.is_empty() {
        return Err(CliError::Analysis("no conversation could be set up from the matched sample".into()));
    }

    let simuser = sim.simuser.connect(MockRole::Simuser)?;
    let assistants: BTreeMap<String, ChatClient> = sim
        .assistants
        .iter()
        .map(|a| Ok((a.model_name.clone(), a.connect(MockRole::Assistant)?)))
        .collect::<Result<_, SimulateError>>()?;

    let model;
    let embedder;
    let scorer = if sim.wants_intervention() {
        model = ScorerModel::load(&ctx.upstream(Stage::TrainScorer, super::scoring::MODEL))?;
        embedder = Embedder::from_config(&cfg.embedding)?;
        Some(Scorer::new(&model, &embedder)?)
    } else {
        None
    };
    let settings = SimulationSettings {
        rounds: sim.rounds,
        base_prompt: sim.base_prompt.clone(),
        intervention: sim.intervention_config(),
        scorer,
        simuser: &simuser,
    };
    let dir = ctx.out(TRANSCRIPT_DIR);
    ctx.reused_items = jobs
        .iter()
        .filter(|j| {
            let path = dir.join(format!("{}.json", file_stem(&j.conversation_id)));
            Transcript::load(&path).is_ok_and(|t| t.status == TranscriptStatus::Complete)
        })
        .count();
    if ctx.reused_items > 0 {
        log::info!("simulate: reusing {} Complete transcript(s)", ctx.reused_items);
    }
    let transcripts = run_batch(&jobs, &assistants, &settings, &dir, sim.concurrency)?;
    let count = |st: TranscriptStatus| transcripts.iter().filter(|t| t.status == st).count();
    let (complete, truncated, failed) =
        (count(TranscriptStatus::Complete), count(TranscriptStatus::Truncated), count(TranscriptStatus::Failed));
    for t in transcripts.iter().filter(|t| t.status != TranscriptStatus::Complete) {
        ctx.warn(format!("{} ended {:?}: {}", t.conversation_id, t.status, t.error.as_deref().unwrap_or("")));
    }

    let users_in = |cohort: delusim_core::Cohort| -> BTreeSet<&str> {
        transcripts.iter().filter(|t| t.cohort == cohort).map(|t| t.user_id.as_str()).collect()
    };
    let composition = serde_json::json!({
        "users_treatment": users_in(delusim_core::Cohort::Treatment).len(),
        "users_control": users_in(delusim_core::Cohort::Control).len(),
        "assistant_models": sim.assistants.iter().map(|a| a.model_name.clone()).collect::<Vec<_>>(),
        "simuser_model": sim.simuser.model_name,
        "conditions": conditions.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
        "conversations_per_user": sim.conversations_per_user,
        "rounds": sim.rounds,
        "conversations": transcripts.len(),
        "complete": complete,
        "truncated": truncated,
        "failed": failed,
    });
    write_json(&ctx.out("composition.json"), &composition)?;
    ctx.composition = Some(composition);
    let prompt_note = if sim.base_prompt.is_empty() { "(empty)".to_string() } else { sim.base_prompt.clone() };
    ctx.notes.insert("standard_condition_system_prompt".into(), prompt_note);

    if complete == 0 {
        let first = transcripts.iter().find_map(|t| t.error.clone()).unwrap_or_default();
        return Err(CliError::Provider(format!("no conversation completed; first error: {first}")));
    }
    Ok(())
}
