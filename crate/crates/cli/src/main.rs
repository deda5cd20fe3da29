//! `sidrec`: the staged training and evaluation pipeline.
//!
//! Every subcommand is one stage. Stages read artifacts from the work
//! directory, refuse stale or missing inputs, and record a manifest of what
//! they consumed and wrote. Exit codes: 0 success, 1 other failure, 2 bad
//! configuration, 3 missing or stale artifact, 4 numerical failure.

mod config;
mod pipeline;
mod stages;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::config::PipelineConfig;
use crate::stages::Ctx;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {artifact} ({path}); run `sidrec {stage}` first")]
    Missing {
        artifact: String,
        path: String,
        stage: String,
    },
    #[error("stale artifact: {0}")]
    Stale(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "sidrec",
    version,
    about = "Semantic-ID recommender with an adaptive fast/slow router"
)]
struct Cli {
    /// TOML configuration file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set decoder.width=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Rerun the stage even when its inputs and config are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Print the stage summary as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads. Stages currently run on one thread; results never
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic interaction corpus to the configured input paths.
    SynthData,
    /// Validate and normalize the raw interaction and item streams.
    Ingest,
    /// Fit residual codebooks and assign a Semantic ID to every item.
    Quantize,
    /// Train the fast generative retriever and precompute its candidates.
    TrainFast,
    /// Train the candidate ranker on fast-path candidates.
    TrainRanker,
    /// Mine co-occurring item pairs and collect teacher explanations.
    BuildI2i,
    /// Train the slow reasoning path (supervised, then reinforcement).
    TrainSlow,
    /// Derive route pseudo-labels from fast-path hit ranks.
    LabelRoutes,
    /// Imitation warm-up of the planner on route labels.
    TrainPlannerWarmup,
    /// Reinforcement training of the planner against the frozen tools.
    TrainPlannerRl,
    /// Evaluate every routing variant and write the report.
    Evaluate,
    /// Run the item-to-item relatedness probe.
    ProbeI2i,
    /// Summarize the planner's routing decisions.
    AnalyzeRouting,
    /// Run every stage in order, skipping up-to-date ones.
    All,
    /// Print the default configuration with the source of each value.
    Defaults,
}

type StageFn = fn(&Ctx) -> Result<Value>;

const ORDER: [StageFn; 13] = [
    stages::synth_data,
    stages::ingest,
    stages::quantize,
    stages::train_fast,
    stages::train_ranker,
    stages::build_i2i,
    stages::train_slow,
    stages::label_routes,
    stages::train_planner_warmup,
    stages::train_planner_rl,
    stages::evaluate,
    stages::probe_i2i,
    stages::analyze_routing,
];

fn stage_fn(c: &Command) -> Option<StageFn> {
    let i = match c {
        Command::SynthData => 0,
        Command::Ingest => 1,
        Command::Quantize => 2,
        Command::TrainFast => 3,
        Command::TrainRanker => 4,
        Command::BuildI2i => 5,
        Command::TrainSlow => 6,
        Command::LabelRoutes => 7,
        Command::TrainPlannerWarmup => 8,
        Command::TrainPlannerRl => 9,
        Command::Evaluate => 10,
        Command::ProbeI2i => 11,
        Command::AnalyzeRouting => 12,
        Command::All | Command::Defaults => return None,
    };
    Some(ORDER[i])
}

fn print_summary(summary: &Value, as_json: bool) {
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(summary).expect("summaries serialize")
        );
        return;
    }
    if let Value::Object(map) = summary {
        for (k, v) in map {
            match v {
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if matches!(cli.command, Command::Defaults) {
        print!("{}", PipelineConfig::defaults_toml());
        return Ok(());
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if cli.threads > 1 {
        log::info!("--threads {} requested; stages run single-threaded", cli.threads);
    }
    let ctx = Ctx {
        cfg: &cfg,
        ws: cfg.workspace(),
        force: cli.force,
    };
    match stage_fn(&cli.command) {
        Some(f) => print_summary(&f(&ctx)?, cli.json),
        None => {
            let mut all = Vec::new();
            for (i, f) in ORDER.iter().enumerate() {
                // raw streams supplied from outside need no synthesis
                if i == 0 && cfg.paths.interactions.is_some() {
                    continue;
                }
                let s = f(&ctx)?;
                if !cli.json {
                    print_summary(&s, false);
                    println!();
                }
                all.push(s);
            }
            if cli.json {
                print_summary(&Value::Array(all), true);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Stale(_) => 3,
        };
    }
    if err
        .chain()
        .any(|c| matches!(c.downcast_ref::<sidrec::Error>(), Some(sidrec::Error::Numerical(_))))
    {
        return 4;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
