//! `anicond`: batch workflows over the conditioning toolkit. Every command
//! is deterministic given (config, seed, inputs); `ANICOND_SEED` overrides
//! the configured seed.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anicond_core::config::RunConfig;

/// Exit codes: 0 success, 2 usage, 3 validation, 4 dependency, 5 numeric.
pub enum CliError {
    Validation(anyhow::Error),
    Dependency(anyhow::Error),
    Numeric(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Dependency(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Validation(e) | CliError::Dependency(e) | CliError::Numeric(e) => e,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn validation<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Validation(e.into())
}

pub fn dependency<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Dependency(e.into())
}

#[derive(Parser)]
#[command(name = "anicond", version, about = "Production-taxonomy conditioning toolkit")]
struct Cli {
    /// TOML config file with a [defaults] section; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (also settable via ANICOND_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vocabulary validation and token canonicalization.
    Taxonomy {
        #[command(subcommand)]
        action: commands::TaxonomyAction,
    },
    /// Structured caption validation, extraction, and directive rendering.
    Caption {
        #[command(subcommand)]
        action: commands::CaptionAction,
    },
    /// Rebalancing weights and Gini diagnostics over a corpus manifest.
    Rebalance(commands::RebalanceArgs),
    /// Curriculum buckets and the combined sampling distribution.
    CurriculumPlan(commands::CurriculumArgs),
    /// Coarse-to-fine operator cascade with tiering.
    Cascade(commands::CascadeArgs),
    /// Seeded toy training of the tag encoder plus DiT block.
    ToyTrain(commands::ToyTrainArgs),
    /// Euler flow sampling with optional dual classifier-free guidance.
    Sample(commands::SampleArgs),
    /// Toy distribution-matching distillation loops.
    Distill(commands::DistillArgs),
    /// Preference-pair construction from Judge scores.
    DpoPairs(commands::DpoPairsArgs),
    /// Evaluation aggregation (rates, F1, bootstrap CI, human means).
    Eval {
        #[command(subcommand)]
        action: commands::EvalAction,
    },
    /// Cascade, rebalance, curriculum-plan, and optional dpo-pairs in order
    /// with hashed stage manifests.
    Pipeline(commands::PipelineArgs),
    /// Human-readable summary of pipeline artifacts.
    Report(commands::ReportArgs),
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| validation(anyhow::anyhow!("cannot read config {path:?}: {e}")))?;
            RunConfig::from_toml_str(&text).map_err(validation)?
        }
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("ANICOND_SEED") {
        config.seed = seed
            .parse()
            .map_err(|e| validation(anyhow::anyhow!("ANICOND_SEED must be an integer: {e}")))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {:#}", e.message());
            return ExitCode::from(e.code());
        }
    };
    let outcome = match cli.command {
        Command::Taxonomy { action } => commands::taxonomy(action),
        Command::Caption { action } => commands::caption(action),
        Command::Rebalance(args) => commands::rebalance(args, &config),
        Command::CurriculumPlan(args) => commands::curriculum_plan(args, &config),
        Command::Cascade(args) => commands::cascade(args),
        Command::ToyTrain(args) => commands::toy_train(args, &config),
        Command::Sample(args) => commands::sample(args, &config),
        Command::Distill(args) => commands::distill(args, &config),
        Command::DpoPairs(args) => commands::dpo_pairs(args, &config),
        Command::Eval { action } => commands::eval(action, &config),
        Command::Pipeline(args) => commands::pipeline(args, &config),
        Command::Report(args) => commands::report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.message());
            ExitCode::from(e.code())
        }
    }
}
