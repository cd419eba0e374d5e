//! Stage runner: dependency gating through manifest hashes, cache hits for
//! unchanged inputs, and manifest bookkeeping around each stage body.

mod analysis;
mod data;
mod report;
mod scoring;
mod simulation;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{hash_bytes, hash_file, list_files, now_ms, relative, EventKind, RunManifest, StageRecord, StageStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Ingest,
    Cohorts,
    Covariates,
    Match,
    TrainScorer,
    EvalScorer,
    Simulate,
    Score,
    Analyze,
    Themes,
    Report,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Cohorts,
        Stage::Covariates,
        Stage::Match,
        Stage::TrainScorer,
        Stage::EvalScorer,
        Stage::Simulate,
        Stage::Score,
        Stage::Analyze,
        Stage::Themes,
        Stage::Report,
    ];

    /// Also the name of the stage's output directory.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cohorts => "cohorts",
            Stage::Covariates => "covariates",
            Stage::Match => "match",
            Stage::TrainScorer => "train-scorer",
            Stage::EvalScorer => "eval-scorer",
            Stage::Simulate => "simulate",
            Stage::Score => "score",
            Stage::Analyze => "analyze",
            Stage::Themes => "themes",
            Stage::Report => "report",
        }
    }

    pub fn deps(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest | Stage::TrainScorer => vec![],
            Stage::Cohorts => vec![Stage::Ingest],
            Stage::Covariates => vec![Stage::Cohorts],
            Stage::Match => vec![Stage::Covariates],
            Stage::EvalScorer => vec![Stage::TrainScorer],
            Stage::Simulate if cfg.simulate.wants_intervention() => vec![Stage::Cohorts, Stage::Match, Stage::TrainScorer],
            Stage::Simulate => vec![Stage::Cohorts, Stage::Match],
            Stage::Score => vec![Stage::Simulate, Stage::TrainScorer],
            Stage::Analyze => vec![Stage::Cohorts, Stage::Score],
            Stage::Themes => vec![Stage::Score],
            Stage::Report => vec![Stage::Match, Stage::EvalScorer, Stage::Analyze, Stage::Themes],
        }
    }

    /// The slice of configuration the stage's outputs depend on.
    fn config_slice(self, cfg: &RunConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::Ingest => json!({ "paths": cfg.corpus.paths }),
            Stage::Cohorts => json!(cfg.cohorts),
            Stage::Covariates => json!({ "embedding": embedding_identity(cfg) }),
            Stage::Match => json!(cfg.matching),
            Stage::TrainScorer => json!({
                "embedding": embedding_identity(cfg),
                "test_fraction": cfg.scorer.test_fraction,
                "l2_lambda": cfg.scorer.l2_lambda,
                "max_iter": cfg.scorer.max_iter,
                "tol": cfg.scorer.tol,
                "seed": cfg.seed_for("scorer"),
            }),
            Stage::EvalScorer => json!({ "threshold": cfg.scorer.threshold, "embedding": embedding_identity(cfg) }),
            Stage::Simulate => json!({
                "simulate": cfg.simulate,
                "embedding": embedding_identity(cfg),
                "seed": cfg.seed_for("simulate"),
            }),
            Stage::Score => json!({ "embedding": embedding_identity(cfg) }),
            Stage::Analyze => json!({ "analysis": cfg.analysis, "seed": cfg.seed_for("fidelity") }),
            Stage::Themes => json!({
                "themes": cfg.themes,
                "embedding": embedding_identity(cfg),
                "seed": cfg.seed_for("themes"),
            }),
            Stage::Report => json!({ "threshold": cfg.scorer.threshold }),
        }
    }

    /// Files outside the run directory that the stage reads.
    fn external_inputs(self, cfg: &RunConfig) -> Vec<PathBuf> {
        match self {
            Stage::Ingest => cfg.corpus.paths.clone(),
            Stage::Covariates | Stage::Analyze => vec![cfg.lexicon.path.clone()],
            Stage::TrainScorer => vec![cfg.scorer.labeled_path.clone()],
            Stage::Simulate => std::iter::once(&cfg.simulate.simuser)
                .chain(&cfg.simulate.assistants)
                .filter_map(|e| e.mock_script().map(Path::to_path_buf))
                .collect(),
            Stage::Themes => cfg.themes.labels_path.iter().cloned().collect(),
            _ => vec![],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The parts of the embedding config that change vectors (not cache location or timeouts).
fn embedding_identity(cfg: &RunConfig) -> serde_json::Value {
    let e = &cfg.embedding;
    serde_json::json!({ "kind": e.kind, "endpoint_url": e.endpoint_url, "model_name": e.model_name, "dimension": e.dimension })
}

/// State handed to a stage body.
pub struct StageCtx<'a> {
    pub cfg: &'a RunConfig,
    pub run_dir: PathBuf,
    /// `run_dir/<stage name>`, created empty (or kept, for a resumable simulate).
    pub dir: PathBuf,
    pub warnings: Vec<String>,
    pub reused_items: usize,
    pub composition: Option<serde_json::Value>,
    pub notes: BTreeMap<String, String>,
}

impl StageCtx<'_> {
    pub fn upstream(&self, stage: Stage, file: &str) -> PathBuf {
        self.run_dir.join(stage.name()).join(file)
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub cache_hit: bool,
    pub warnings: Vec<String>,
    pub duration_ms: u128,
}

/// Hash of each output file, keyed by run-relative path.
fn hash_outputs(run_dir: &Path, dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for rel in list_files(dir)? {
        let path = dir.join(&rel);
        out.insert(relative(run_dir, &path), hash_file(&path)?);
    }
    Ok(out)
}

/// Whether the recorded outputs are still on disk, unchanged, with nothing extra.
fn outputs_intact(run_dir: &Path, stage: Stage, record: &StageRecord) -> Result<bool, CliError> {
    let now = hash_outputs(run_dir, &run_dir.join(stage.name()))?;
    Ok(now == record.outputs)
}

fn check_dependency(run_dir: &Path, manifest: &RunManifest, stage: Stage, dep: Stage, cfg: &RunConfig) -> Result<String, CliError> {
    let fail = |reason: &str| CliError::Dependency { stage: stage.name().into(), missing: dep.name().into(), reason: reason.into() };
    let Some(rec) = manifest.stages.get(dep.name()) else {
        return Err(fail("it has not been run"));
    };
    if rec.status != StageStatus::Ok {
        return Err(fail("its last run failed"));
    }
    if !outputs_intact(run_dir, dep, rec)? {
        return Err(fail("its outputs changed on disk since it ran"));
    }
    // an upstream stage that would rerun under the current configuration is stale
    let current = stage_inputs(run_dir, manifest, dep, cfg)?;
    if hash_inputs(&current) != rec.input_hash {
        return Err(fail("it is out of date with the current configuration or input files"));
    }
    Ok(hash_bytes(serde_json::to_string(&rec.outputs).expect("map serializes").as_bytes()))
}

fn stage_inputs(run_dir: &Path, manifest: &RunManifest, stage: Stage, cfg: &RunConfig) -> Result<BTreeMap<String, String>, CliError> {
    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), hash_bytes(stage.config_slice(cfg).to_string().as_bytes()));
    inputs.insert("tool_version".to_string(), crate::manifest::TOOL_VERSION.to_string());
    for dep in stage.deps(cfg) {
        inputs.insert(format!("stage:{}", dep.name()), check_dependency(run_dir, manifest, stage, dep, cfg)?);
    }
    for path in stage.external_inputs(cfg) {
        let hash = hash_file(&path).map_err(|_| CliError::Config(format!("cannot read input {}", path.display())))?;
        inputs.insert(format!("file:{}", path.display()), hash);
    }
    Ok(inputs)
}

fn hash_inputs(inputs: &BTreeMap<String, String>) -> String {
    hash_bytes(serde_json::to_string(inputs).expect("map serializes").as_bytes())
}

/// Marker written into the simulate directory so a rerun with the same
/// inputs resumes instead of starting over.
const RESUME_MARKER: &str = "input_hash.txt";

/// Run one stage: check dependencies, skip on unchanged inputs, otherwise
/// execute and record the result in the manifest.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutcome, CliError> {
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(CliError::io(&run_dir))?;
    let mut manifest = RunManifest::load_or_new(&run_dir)?;
    manifest.config = cfg.snapshot();

    let inputs = stage_inputs(&run_dir, &manifest, stage, cfg)?;
    let input_hash = hash_inputs(&inputs);

    if let Some(rec) = manifest.stages.get(stage.name()) {
        if rec.status == StageStatus::Ok && rec.input_hash == input_hash && outputs_intact(&run_dir, stage, rec)? {
            log::info!("{stage}: inputs unchanged, nothing to do");
            manifest.record_event(stage.name(), EventKind::CacheHit, &input_hash);
            manifest.save(&run_dir)?;
            return Ok(StageOutcome { stage, cache_hit: true, warnings: vec![], duration_ms: 0 });
        }
    }

    let dir = run_dir.join(stage.name());
    prepare_dir(stage, &dir, &input_hash)?;
    let mut ctx = StageCtx {
        cfg,
        run_dir: run_dir.clone(),
        dir: dir.clone(),
        warnings: Vec::new(),
        reused_items: 0,
        composition: None,
        notes: BTreeMap::new(),
    };
    let started = now_ms();
    let clock = Instant::now();
    log::info!("{stage}: running");
    let result = match stage {
        Stage::Ingest => data::ingest(&mut ctx),
        Stage::Cohorts => data::cohorts(&mut ctx),
        Stage::Covariates => data::covariates(&mut ctx),
        Stage::Match => data::matching(&mut ctx),
        Stage::TrainScorer => scoring::train(&mut ctx),
        Stage::EvalScorer => scoring::evaluate(&mut ctx),
        Stage::Simulate => simulation::simulate(&mut ctx),
        Stage::Score => scoring::score(&mut ctx),
        Stage::Analyze => analysis::analyze(&mut ctx),
        Stage::Themes => analysis::themes(&mut ctx),
        Stage::Report => report::report(&mut ctx),
    };
    let duration_ms = clock.elapsed().as_millis();
    let outputs = hash_outputs(&run_dir, &dir)?;
    let (status, error, event) = match &result {
        Ok(()) => (StageStatus::Ok, None, EventKind::Ran),
        Err(e) => (StageStatus::Failed, Some(e.to_string()), EventKind::Failed),
    };
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            status,
            input_hash: input_hash.clone(),
            inputs,
            outputs,
            started_unix_ms: started,
            duration_ms,
            reused_items: ctx.reused_items,
            warnings: ctx.warnings.clone(),
            error,
        },
    );
    if let Some(c) = ctx.composition.take() {
        manifest.composition = Some(c);
    }
    manifest.notes.extend(std::mem::take(&mut ctx.notes));
    manifest.record_event(stage.name(), event, &input_hash);
    manifest.save(&run_dir)?;
    result.map(|()| StageOutcome { stage, cache_hit: false, warnings: ctx.warnings, duration_ms })
}

fn prepare_dir(stage: Stage, dir: &Path, input_hash: &str) -> Result<(), CliError> {
    if stage == Stage::Simulate {
        let marker = dir.join(RESUME_MARKER);
        let same = std::fs::read_to_string(&marker).map(|s| s.trim() == input_hash).unwrap_or(false);
        if same {
            log::info!("simulate: resuming; Complete transcripts are reused");
            return Ok(());
        }
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    if stage == Stage::Simulate {
        let marker = dir.join(RESUME_MARKER);
        std::fs::write(&marker, format!("{input_hash}\n")).map_err(CliError::io(&marker))?;
    }
    Ok(())
}

/// Every stage in order; stops at the first failure.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<StageOutcome>, CliError> {
    Stage::ALL.iter().map(|&s| run_stage(s, cfg)).collect()
}

// ---- small shared helpers for stage bodies ----

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, json).map_err(CliError::io(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Analysis(format!("{}: {e}", path.display())))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("item serializes"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(CliError::io(path))
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Analysis(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// CSV with a header row; floats go through [`num`].
pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Shortest round-trip decimal; empty for missing values.
/// Shortest round-trip form; very large or small magnitudes use exponent notation.
pub(crate) fn num(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}
