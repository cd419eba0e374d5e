use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delusim_cli::config::parse_overrides;
use delusim_cli::synth::{write_fixture, FixtureParams};
use delusim_cli::{run_pipeline, run_stage, CliError, RunConfig, Stage, StageOutcome};

#[derive(Parser)]
#[command(name = "delusim", version, about = "Cohort matching, persona simulation and DelusionScore trajectory analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Config overrides such as `--k-range=3..10`, `--l2=0.5` or `--simulate.rounds=10`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the corpus.
    Ingest(StageArgs),
    /// Assign users to treatment and control cohorts.
    Cohorts(StageArgs),
    /// Compute per-user covariates (embeddings and lexicon rates).
    Covariates(StageArgs),
    /// Fit propensity scores and select the stratification.
    Match(StageArgs),
    /// Train the DelusionScore classifier.
    TrainScorer(StageArgs),
    /// Evaluate the classifier on its held-out split.
    EvalScorer(StageArgs),
    /// Simulate conversations for the matched sample.
    Simulate(StageArgs),
    /// Score every SimUser turn.
    Score(StageArgs),
    /// Trajectory statistics, cohort comparisons and persona fidelity.
    Analyze(StageArgs),
    /// Theme discovery and per-theme trends.
    Themes(StageArgs),
    /// Tables and figures.
    Report(StageArgs),
    /// Every stage in order, skipping those whose inputs are unchanged.
    Pipeline(StageArgs),
    /// Write a synthetic offline fixture with a ready-to-run `run.toml`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        treatment_users: usize,
        #[arg(long, default_value_t = 60)]
        control_users: usize,
        #[arg(long, default_value_t = 34)]
        rounds: usize,
        #[arg(long, default_value_t = 150)]
        labeled_per_class: usize,
    },
}

fn load(args: &StageArgs) -> Result<RunConfig, CliError> {
    let overrides = parse_overrides(&args.overrides)?;
    RunConfig::load(&args.config, &overrides)
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.cache_hit { "cached" } else { "done" };
    println!("{:<13} {state} ({} ms)", o.stage.name(), o.duration_ms);
    for w in &o.warnings {
        println!("  warning: {w}");
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (stage, args) = match cli.command {
        Command::Synth { out, seed, treatment_users, control_users, rounds, labeled_per_class } => {
            let path = write_fixture(&out, &FixtureParams { seed, treatment_users, control_users, rounds, labeled_per_class })?;
            println!("{}", path.display());
            return Ok(());
        }
        Command::Pipeline(args) => {
            for o in run_pipeline(&load(&args)?)? {
                print_outcome(&o);
            }
            return Ok(());
        }
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Cohorts(a) => (Stage::Cohorts, a),
        Command::Covariates(a) => (Stage::Covariates, a),
        Command::Match(a) => (Stage::Match, a),
        Command::TrainScorer(a) => (Stage::TrainScorer, a),
        Command::EvalScorer(a) => (Stage::EvalScorer, a),
        Command::Simulate(a) => (Stage::Simulate, a),
        Command::Score(a) => (Stage::Score, a),
        Command::Analyze(a) => (Stage::Analyze, a),
        Command::Themes(a) => (Stage::Themes, a),
        Command::Report(a) => (Stage::Report, a),
    };
    print_outcome(&run_stage(stage, &load(&args)?)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
