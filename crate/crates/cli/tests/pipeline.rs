//! End-to-end runs of the `delusim` binary and library on the synthetic
//! fixture: artifacts, manifest bookkeeping, caching, dependency errors,
//! overrides and simulate resumption.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use delusim_cli::manifest::{hash_file, EventKind, RunManifest, StageStatus};
use delusim_cli::synth::{write_fixture, FixtureParams};
use delusim_cli::{run_pipeline, run_stage, CliError, RunConfig, Stage};
use tempfile::TempDir;

fn fixture(rounds: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let params = FixtureParams { rounds, treatment_users: 24, control_users: 36, ..Default::default() };
    let cfg = write_fixture(dir.path(), &params).unwrap();
    (dir, cfg)
}

fn delusim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delusim")).args(args).output().expect("binary runs")
}

fn run_dir(fx: &TempDir) -> PathBuf {
    fx.path().join("run")
}

fn load(cfg: &Path) -> RunConfig {
    RunConfig::load(cfg, &[]).unwrap()
}

#[test]
fn pipeline_writes_every_artifact_and_a_complete_manifest() {
    let (fx, cfg) = fixture(8);
    let out = delusim(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = run_dir(&fx);
    for rel in [
        "ingest/posts.jsonl",
        "cohorts/users.jsonl",
        "cohorts/membership.csv",
        "covariates/covariates.jsonl",
        "match/strata.csv",
        "match/balance.csv",
        "match/balance_summary.json",
        "match/propensity.json",
        "train-scorer/model.json",
        "eval-scorer/metrics.json",
        "eval-scorer/metrics.csv",
        "simulate/composition.json",
        "score/scored.jsonl",
        "score/turn_scores.csv",
        "analyze/analysis.json",
        "analyze/effects.csv",
        "analyze/per_round_means.csv",
        "analyze/fidelity.csv",
        "themes/themes.csv",
        "themes/coherence.csv",
        "themes/theme_trends.csv",
        "report/table1_fidelity.csv",
        "report/table2_trajectories.csv",
        "report/table3_theme_trends.csv",
        "report/balance.csv",
        "report/summary.json",
        "report/coherence.svg",
        "report/figure2_mock-assistant_standard.svg",
        "report/figure2_mock-assistant_intervention.svg",
    ] {
        assert!(run.join(rel).is_file(), "missing {rel}");
    }

    let m = RunManifest::load_or_new(&run).unwrap();
    assert_eq!(m.stages.len(), Stage::ALL.len());
    assert!(m.stages.values().all(|r| r.status == StageStatus::Ok));
    assert!(m.composition.is_some());
    assert!(m.notes.contains_key("standard_condition_system_prompt"));
    assert_eq!(m.config["seed"], 7);
    // every file is listed with its current hash
    for (rel, hash) in &m.files {
        match hash {
            Some(h) => assert_eq!(h, &hash_file(&run.join(rel)).unwrap(), "{rel}"),
            None => assert_eq!(rel, "manifest.json"),
        }
    }
    let transcripts = std::fs::read_dir(run.join("simulate/transcripts")).unwrap().count();
    assert_eq!(m.files.keys().filter(|k| k.starts_with("simulate/transcripts/")).count(), transcripts);
    // 60 users × 1 assistant × 2 conditions, all matched in this fixture or fewer
    assert!(transcripts > 0 && transcripts <= 120);
}

#[test]
fn rerun_with_unchanged_inputs_is_a_cache_hit() {
    let (fx, cfg) = fixture(6);
    let c = load(&cfg);
    let first = run_pipeline(&c).unwrap();
    assert!(first.iter().all(|o| !o.cache_hit));
    let before = std::fs::read(run_dir(&fx).join("report/table2_trajectories.csv")).unwrap();
    let second = run_pipeline(&c).unwrap();
    assert!(second.iter().all(|o| o.cache_hit));
    assert_eq!(before, std::fs::read(run_dir(&fx).join("report/table2_trajectories.csv")).unwrap());
    let m = RunManifest::load_or_new(&run_dir(&fx)).unwrap();
    let hits = m.history.iter().filter(|e| e.event == EventKind::CacheHit).count();
    assert_eq!(hits, Stage::ALL.len());

    // a config change reruns only the stages that depend on it
    let changed = RunConfig::load(&cfg, &delusim_cli::config::parse_overrides(&["--l2=2.0".into()]).unwrap()).unwrap();
    let third = run_pipeline(&changed).unwrap();
    let reran: Vec<Stage> = third.iter().filter(|o| !o.cache_hit).map(|o| o.stage).collect();
    assert!(reran.contains(&Stage::Match) && reran.contains(&Stage::Report));
    for s in [Stage::Ingest, Stage::Cohorts, Stage::Covariates, Stage::TrainScorer, Stage::EvalScorer] {
        assert!(!reran.contains(&s), "{s:?} should have been cached");
    }
}

#[test]
fn stage_before_its_dependency_exits_3() {
    let (_fx, cfg) = fixture(6);
    let cfg = cfg.to_str().unwrap();
    let out = delusim(&["analyze", "--config", cfg]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("delusim cohorts --config"), "{err}");

    for s in ["ingest", "cohorts", "covariates", "match", "train-scorer", "eval-scorer", "simulate"] {
        let out = delusim(&[s, "--config", cfg]);
        assert!(out.status.success(), "{s}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = delusim(&["analyze", "--config", cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delusim score --config"));
}

#[test]
fn stale_or_tampered_upstream_is_a_dependency_error() {
    let (fx, cfg) = fixture(6);
    let c = load(&cfg);
    for s in [Stage::Ingest, Stage::Cohorts, Stage::Covariates] {
        run_stage(s, &c).unwrap();
    }
    // covariates computed under one embedding config cannot feed a match run under another
    let other = RunConfig::load(&cfg, &delusim_cli::config::parse_overrides(&["--embedding.dimension=8".into()]).unwrap()).unwrap();
    assert!(matches!(run_stage(Stage::Match, &other), Err(CliError::Dependency { .. })));
    run_stage(Stage::Match, &c).unwrap();

    std::fs::write(run_dir(&fx).join("covariates/covariates.jsonl"), "{}\n").unwrap();
    let err = run_stage(Stage::Match, &c).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("changed on disk"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let (_fx, cfg) = fixture(6);
    let cfg = cfg.to_str().unwrap();
    for bad in [&["--matching.bogus=1"][..], &["--k-range=2..10"], &["--threshold=1.5"], &["--simulate.rounds=0"], &["stray"]] {
        let mut args = vec!["ingest", "--config", cfg];
        args.extend_from_slice(bad);
        let out = delusim(&args);
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(delusim(&["ingest", "--config", "/nonexistent/run.toml"]).status.code(), Some(2));
}

#[test]
fn overrides_reach_the_stages() {
    let (fx, cfg) = fixture(6);
    let cfg = cfg.to_str().unwrap();
    for s in ["ingest", "cohorts", "covariates"] {
        assert!(delusim(&[s, "--config", cfg]).status.success());
    }
    let out = delusim(&["match", "--config", cfg, "--k-range=4..6", "--min-per-group", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir(&fx).join("match/balance_summary.json")).unwrap()).unwrap();
    let ks: Vec<u64> = summary["per_k"].as_array().unwrap().iter().map(|r| r["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, vec![4, 5, 6]);
    let m = RunManifest::load_or_new(&run_dir(&fx)).unwrap();
    assert_eq!(m.config["matching"]["k_min"], 4);
    assert_eq!(m.config["matching"]["min_per_group"], 3);
}

#[test]
fn simulate_resumes_from_complete_transcripts() {
    let (fx, cfg) = fixture(6);
    let c = load(&cfg);
    for s in [Stage::Ingest, Stage::Cohorts, Stage::Covariates, Stage::Match, Stage::TrainScorer, Stage::Simulate] {
        run_stage(s, &c).unwrap();
    }
    let dir = run_dir(&fx).join("simulate/transcripts");
    let transcripts = || -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    };
    let files = transcripts();
    let victim = files[0].clone();
    let original = std::fs::read(&victim).unwrap();
    std::fs::remove_file(&victim).unwrap();

    let outcome = run_stage(Stage::Simulate, &c).unwrap();
    assert!(!outcome.cache_hit);
    let m = RunManifest::load_or_new(&run_dir(&fx)).unwrap();
    assert_eq!(m.stages["simulate"].reused_items, files.len() - 1);
    assert_eq!(std::fs::read(&victim).unwrap(), original);
    // the interrupted conversation is redone identically, the others untouched
    assert_eq!(transcripts(), files);
}

#[test]
fn provider_failure_exits_4() {
    let (fx, cfg) = fixture(6);
    // a script that only knows the assistant side leaves the SimUser unanswered
    let script = fx.path().join("mock_script.jsonl");
    let text = std::fs::read_to_string(&script).unwrap();
    let assistant_only: String = text.lines().filter(|l| l.contains("\"role\":\"assistant\"")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&script, assistant_only).unwrap();
    let cfg = cfg.to_str().unwrap();
    for s in ["ingest", "cohorts", "covariates", "match", "train-scorer"] {
        assert!(delusim(&[s, "--config", cfg]).status.success());
    }
    let out = delusim(&["simulate", "--config", cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let m = RunManifest::load_or_new(&run_dir(&fx)).unwrap();
    assert_eq!(m.stages["simulate"].status, StageStatus::Failed);
    // and a failed upstream blocks its dependents
    assert_eq!(delusim(&["score", "--config", cfg]).status.code(), Some(3));
}

#[test]
fn synth_subcommand_writes_a_runnable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = delusim(&["synth", "--out", dir.path().to_str().unwrap(), "--rounds", "4", "--treatment-users", "20", "--control-users", "30"]);
    assert!(out.status.success());
    for f in ["run.toml", "posts.jsonl", "labeled.jsonl", "lexicon.dic", "mock_script.jsonl"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let cfg = load(&dir.path().join("run.toml"));
    assert_eq!(cfg.simulate.rounds, 4);
}
