//! Writes a self-contained synthetic fixture: a small corpus, a labeled
//! scorer corpus, a lexicon, a mock chat script and a `run.toml` that wires
//! them together. The mock script makes treatment personas escalate under a
//! validating assistant and calm down once the assistant sees a
//! DelusionScore, so the whole pipeline runs offline.

use std::path::{Path, PathBuf};

use delusim_core::synth::{
    labeled_corpus, mini_corpus, mini_lexicon_dic, mock_script_jsonl, MiniCorpusParams, CONTROL_COMMUNITIES,
    TREATMENT_COMMUNITIES,
};

use crate::error::CliError;

pub const RUN_TOML: &str = "run.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    pub seed: u64,
    pub treatment_users: usize,
    pub control_users: usize,
    pub rounds: usize,
    pub labeled_per_class: usize,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams { seed: 7, treatment_users: 40, control_users: 60, rounds: 34, labeled_per_class: 150 }
    }
}

fn write(path: PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(&path, contents).map_err(CliError::io(&path))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("fixture record serializes") + "\n").collect()
}

fn toml_list(items: &[&str]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| format!("{s:?}")).collect();
    format!("[{}]", quoted.join(", "))
}

/// Writes the fixture into `dir` and returns the path of its `run.toml`.
pub fn write_fixture(dir: &Path, p: &FixtureParams) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let posts = mini_corpus(&MiniCorpusParams { treatment_users: p.treatment_users, control_users: p.control_users, seed: p.seed });
    write(dir.join("posts.jsonl"), &jsonl(&posts))?;
    write(dir.join("labeled.jsonl"), &jsonl(&labeled_corpus(p.labeled_per_class, p.seed.wrapping_add(1))))?;
    write(dir.join("lexicon.dic"), &mini_lexicon_dic())?;
    write(dir.join("mock_script.jsonl"), &mock_script_jsonl(p.rounds))?;

    let run = format!(
        r#"# Synthetic end-to-end fixture; every path is relative to this file.
seed = {seed}
out_dir = "run"

[corpus]
paths = ["posts.jsonl"]

[cohorts]
treatment_communities = {treatment}
control_communities = {control}
min_treatment_posts = 100

[lexicon]
path = "lexicon.dic"

[embedding]
kind = "hashing"
dimension = 32

[matching]
k_min = 3
k_max = 10
min_per_group = 3

[scorer]
labeled_path = "labeled.jsonl"

[simulate]
rounds = {rounds}
concurrency = 4
exemplars = 5
conditions = ["standard", "intervention"]

[simulate.simuser]
base_url = "mock:mock_script.jsonl"
model_name = "mock-simuser"
rate_limit_per_minute = 600000.0

[[simulate.assistants]]
base_url = "mock:mock_script.jsonl"
model_name = "mock-assistant"
rate_limit_per_minute = 600000.0

[themes]
k_min = 2
k_max = 8
"#,
        seed = p.seed,
        treatment = toml_list(TREATMENT_COMMUNITIES),
        control = toml_list(CONTROL_COMMUNITIES),
        rounds = p.rounds,
    );
    let path = dir.join(RUN_TOML);
    write(path.clone(), &run)?;
    Ok(path)
}
