//! Run configuration: a TOML file, dotted `--key=value` overrides applied on
//! top of it, path resolution relative to the file, and validation.

use std::path::{Path, PathBuf};

use delusim_core::analysis::LowessParams;
use delusim_core::features::EmbeddingProviderConfig;
use delusim_core::matching::{LogisticParams, SweepParams};
use delusim_core::simulate::{InterventionConfig, LlmEndpoint, DEFAULT_EXEMPLARS, DEFAULT_INTERVENTION_TEMPLATE, DEFAULT_ROUNDS};
use delusim_core::themes::{ThemeParams, CV_WINDOW};
use delusim_core::{CohortSpec, Condition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub cohorts: CohortSpec,
    pub lexicon: LexiconConfig,
    pub embedding: EmbeddingProviderConfig,
    #[serde(default)]
    pub matching: MatchingConfig,
    pub scorer: ScorerConfig,
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub themes: ThemesConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub l2_lambda: f64,
    pub min_per_group: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        let sweep = SweepParams::default();
        let logistic = LogisticParams::default();
        MatchingConfig {
            k_min: sweep.k_min,
            k_max: sweep.k_max,
            l2_lambda: logistic.l2_lambda,
            min_per_group: sweep.min_per_group,
            max_iter: logistic.max_iter,
            tol: logistic.tol,
        }
    }
}

impl MatchingConfig {
    pub fn sweep(&self) -> SweepParams {
        SweepParams { k_min: self.k_min, k_max: self.k_max, min_per_group: self.min_per_group }
    }

    pub fn logistic(&self) -> LogisticParams {
        LogisticParams { l2_lambda: self.l2_lambda, max_iter: self.max_iter, tol: self.tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub labeled_path: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_scorer_lambda")]
    pub l2_lambda: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_test_fraction() -> f64 {
    0.25
}
fn default_threshold() -> f64 {
    0.5
}
fn default_scorer_lambda() -> f64 {
    1e-3
}
fn default_max_iter() -> usize {
    3000
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionName {
    Standard,
    Intervention,
}

impl From<ConditionName> for Condition {
    fn from(c: ConditionName) -> Condition {
        match c {
            ConditionName::Standard => Condition::Standard,
            ConditionName::Intervention => Condition::Intervention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_precision")]
    pub score_precision: usize,
}

fn default_template() -> String {
    DEFAULT_INTERVENTION_TEMPLATE.to_string()
}
fn default_precision() -> usize {
    2
}

impl Default for InterventionSection {
    fn default() -> Self {
        InterventionSection { template: default_template(), score_precision: default_precision() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_one")]
    pub conversations_per_user: usize,
    #[serde(default = "default_exemplars")]
    pub exemplars: usize,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ConditionName>,
    /// Assistant system prompt in the Standard condition; empty by default.
    #[serde(default)]
    pub base_prompt: String,
    /// Cap on simulated users per cohort, drawn reproducibly from the matched sample.
    #[serde(default)]
    pub max_users_per_cohort: Option<usize>,
    pub simuser: LlmEndpoint,
    pub assistants: Vec<LlmEndpoint>,
    #[serde(default)]
    pub intervention: InterventionSection,
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}
fn default_concurrency() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_exemplars() -> usize {
    DEFAULT_EXEMPLARS
}
fn default_conditions() -> Vec<ConditionName> {
    vec![ConditionName::Standard, ConditionName::Intervention]
}

impl SimulateConfig {
    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<ConditionName> = self.conditions.clone();
        c.sort();
        c.dedup();
        c.into_iter().map(Condition::from).collect()
    }

    pub fn wants_intervention(&self) -> bool {
        self.conditions.contains(&ConditionName::Intervention)
    }

    pub fn intervention_config(&self) -> InterventionConfig {
        InterventionConfig {
            enabled: self.wants_intervention(),
            template: self.intervention.template.clone(),
            score_precision: self.intervention.score_precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub lowess_frac: f64,
    pub robust_iters: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let p = LowessParams::default();
        AnalysisConfig { lowess_frac: p.frac, robust_iters: p.robust_iters }
    }
}

impl AnalysisConfig {
    pub fn lowess(&self) -> LowessParams {
        LowessParams { frac: self.lowess_frac, robust_iters: self.robust_iters }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThemesConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub window: usize,
    pub top_n: usize,
    pub max_iters: usize,
    /// Optional JSON object mapping theme id to a human label.
    pub labels_path: Option<PathBuf>,
}

impl Default for ThemesConfig {
    fn default() -> Self {
        let p = ThemeParams::default();
        ThemesConfig { k_min: p.k_min, k_max: p.k_max, window: CV_WINDOW, top_n: p.top_n, max_iters: p.max_iters, labels_path: None }
    }
}

impl ThemesConfig {
    pub fn params(&self) -> ThemeParams {
        ThemeParams { k_min: self.k_min, k_max: self.k_max, top_n: self.top_n, window: self.window, max_iters: self.max_iters }
    }
}

/// Module seed: the first eight bytes of SHA-256 over the global seed and the module name.
pub fn derive_seed(global: u64, module: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(module.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Shorthand flags mapped onto dotted keys. `--k-range` is handled separately.
const ALIASES: &[(&str, &str)] = &[
    ("min-per-group", "matching.min_per_group"),
    ("l2", "matching.l2_lambda"),
    ("threshold", "scorer.threshold"),
    ("seed", "seed"),
    ("out-dir", "out_dir"),
    ("rounds", "simulate.rounds"),
    ("concurrency", "simulate.concurrency"),
];

/// One `key = value` assignment from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: Vec<String>,
    pub value: toml::Value,
}

/// Parse trailing `--key=value` / `--key value` arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<Override>, CliError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(body) = arg.strip_prefix("--") else {
            return Err(CliError::Config(format!("unexpected argument {arg:?}; overrides look like --key=value")));
        };
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Config(format!("override --{body} has no value")))?
                    .clone();
                i += 1;
                (body.to_string(), v)
            }
        };
        i += 1;
        if key.is_empty() {
            return Err(CliError::Config(format!("empty override key in {arg:?}")));
        }
        if key == "k-range" {
            let (lo, hi) = raw
                .split_once("..")
                .ok_or_else(|| CliError::Config(format!("--k-range expects LO..HI, got {raw:?}")))?;
            let hi = hi.strip_prefix('=').unwrap_or(hi);
            for (name, v) in [("k_min", lo), ("k_max", hi)] {
                let n: i64 = v.trim().parse().map_err(|_| CliError::Config(format!("--k-range bound {v:?} is not an integer")))?;
                out.push(Override { key: vec!["matching".into(), name.into()], value: toml::Value::Integer(n) });
            }
            continue;
        }
        let dotted = ALIASES.iter().find(|(a, _)| *a == key).map(|(_, d)| d.to_string()).unwrap_or(key);
        let path: Vec<String> = dotted.split('.').map(|s| s.replace('-', "_")).collect();
        out.push(Override { key: path, value: parse_value(&raw) });
    }
    Ok(out)
}

/// A TOML literal if it parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply(root: &mut toml::Value, ov: &Override) -> Result<(), CliError> {
    let name = ov.key.join(".");
    let mut node = root;
    for (depth, seg) in ov.key.iter().enumerate() {
        let last = depth + 1 == ov.key.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.clone(), ov.value.clone());
                    return Ok(());
                }
                t.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| CliError::Config(format!("override {name}: {seg:?} is not an array index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| CliError::Config(format!("override {name}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = ov.value.clone();
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("override {name}: {seg:?} is inside a scalar"))),
        };
    }
    Ok(())
}

impl RunConfig {
    /// Read `path`, apply overrides, resolve relative paths against the
    /// file's directory and validate.
    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: toml::Value = toml::from_str::<toml::Table>(&text)
            .map(toml::Value::Table)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for ov in overrides {
            apply(&mut value, ov)?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        self.corpus.paths.iter_mut().for_each(fix);
        fix(&mut self.lexicon.path);
        fix(&mut self.scorer.labeled_path);
        if let Some(p) = self.embedding.cache_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.themes.labels_path.as_mut() {
            fix(p);
        }
        for ep in std::iter::once(&mut self.simulate.simuser).chain(self.simulate.assistants.iter_mut()) {
            if let Some(script) = ep.base_url.strip_prefix("mock:") {
                let p = Path::new(script);
                if p.is_relative() {
                    ep.base_url = format!("mock:{}", base.join(p).display());
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let must_exist = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{what} {} does not exist", p.display())))
            }
        };
        if self.corpus.paths.is_empty() {
            return Err(CliError::Config("corpus.paths is empty".into()));
        }
        for p in &self.corpus.paths {
            must_exist("corpus file", p)?;
        }
        must_exist("lexicon", &self.lexicon.path)?;
        must_exist("labeled corpus", &self.scorer.labeled_path)?;
        if let Some(p) = &self.themes.labels_path {
            must_exist("theme labels", p)?;
        }
        for ep in std::iter::once(&self.simulate.simuser).chain(&self.simulate.assistants) {
            ep.validate()?;
            if let Some(script) = ep.mock_script() {
                must_exist("mock script", script)?;
            }
        }
        self.cohorts.validate()?;
        self.embedding.validate()?;

        let m = &self.matching;
        if !(3..=10).contains(&m.k_min) || !(3..=10).contains(&m.k_max) || m.k_min > m.k_max {
            return Err(CliError::Config(format!("matching k range {}..{} must lie within 3..10", m.k_min, m.k_max)));
        }
        if m.min_per_group == 0 || m.l2_lambda.is_nan() || m.l2_lambda < 0.0 || m.max_iter == 0 {
            return Err(CliError::Config("matching needs min_per_group >= 1, l2_lambda >= 0 and max_iter >= 1".into()));
        }
        let s = &self.scorer;
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            return Err(CliError::Config(format!("scorer.test_fraction {} must be in (0, 1)", s.test_fraction)));
        }
        if !(0.0..=1.0).contains(&s.threshold) {
            return Err(CliError::Config(format!("scorer.threshold {} must be in [0, 1]", s.threshold)));
        }
        if s.l2_lambda.is_nan() || s.l2_lambda < 0.0 {
            return Err(CliError::Config("scorer.l2_lambda must be >= 0".into()));
        }
        let sim = &self.simulate;
        if sim.rounds == 0 || sim.concurrency == 0 || sim.conversations_per_user == 0 {
            return Err(CliError::Config("simulate.rounds, concurrency and conversations_per_user must be >= 1".into()));
        }
        if sim.exemplars == 0 {
            return Err(CliError::Config("simulate.exemplars must be >= 1".into()));
        }
        if sim.conditions.is_empty() {
            return Err(CliError::Config("simulate.conditions is empty".into()));
        }
        if sim.assistants.is_empty() {
            return Err(CliError::Config("simulate.assistants is empty".into()));
        }
        let mut names: Vec<&str> = sim.assistants.iter().map(|a| a.model_name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("simulate.assistants model names must be unique".into()));
        }
        if sim.wants_intervention() {
            sim.intervention_config().validate()?;
        }
        let a = &self.analysis;
        if !(a.lowess_frac > 0.0 && a.lowess_frac <= 1.0) {
            return Err(CliError::Config(format!("analysis.lowess_frac {} must be in (0, 1]", a.lowess_frac)));
        }
        let t = &self.themes;
        if t.k_min == 0 || t.k_min > t.k_max || t.window < 2 || t.top_n < 2 {
            return Err(CliError::Config("themes needs 1 <= k_min <= k_max, window >= 2, top_n >= 2".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    /// JSON snapshot of the resolved configuration, as stored in the manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
