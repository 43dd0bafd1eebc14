//! Command-line pipeline: knowledge base, silver supervision, training,
//! generation, baselines and evaluation.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use commands::{BaselineMethod, SplitSel};
use config::RunConfig;
use discourse_core::supervision::SupervisionMode;
use discourse_model::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "discourse", version, about = "Discourse-aware commonsense inference pipeline")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (does not change outputs).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Keep only the first N sentences of each story.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, clap::Args)]
pub struct StoryArgs {
    #[arg(long)]
    pub stories: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    pub split: SplitSel,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Normalize a knowledge base (TSV, CSV or JSONL) into JSONL.
    BuildKb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build the silver training set.
    BuildSupervision {
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        story: StoryArgs,
        #[arg(long)]
        output: PathBuf,
        /// heuristic, model or both.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        keep: Option<usize>,
        /// ngram, uniform or command.
        #[arg(long)]
        scorer: Option<String>,
    },
    /// Train the generator on a silver file.
    Train {
        #[arg(long)]
        silver: PathBuf,
        #[command(flatten)]
        story: StoryArgs,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// memory or memoryless.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Decode all 9 dimensions for every sentence of every story.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        story: StoryArgs,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// memory or memoryless.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run a non-discourse baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        story: StoryArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score generated inferences against references.
    Evaluate {
        #[arg(long)]
        inferences: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        stories: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// lexical or constant:<label>.
        #[arg(long)]
        nli: Option<String>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    s.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        c.workers = w;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(w) = cli.window {
        c.window = w;
    }
    match &cli.command {
        Cmd::BuildSupervision {
            mode,
            top_n,
            keep,
            scorer,
            ..
        } => {
            if let Some(m) = mode {
                c.supervision.mode = m
                    .parse::<SupervisionMode>()
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if let Some(n) = top_n {
                c.supervision.top_n = *n;
            }
            if let Some(k) = keep {
                c.supervision.keep = *k;
            }
            if let Some(s) = scorer {
                c.scorer.kind = s.clone();
            }
        }
        Cmd::Train { epochs, variant, .. } => {
            if let Some(e) = epochs {
                c.train.epochs = *e;
            }
            if let Some(v) = variant {
                c.model.variant = parse_variant(v)?;
            }
        }
        Cmd::Generate { beam: Some(b), .. } => c.decode.beam = *b,
        Cmd::Evaluate { nli: Some(n), .. } => c.eval.nli = n.clone(),
        _ => {}
    }
    c.finalize()
}

/// Runs one parsed invocation, returning the message printed on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let config = effective_config(cli)?;
    match &cli.command {
        Cmd::BuildKb { input, output } => commands::cmd_build_kb(&commands::BuildKbArgs { input, output }, &config),
        Cmd::BuildSupervision { kb, story, output, .. } => {
            let s = commands::cmd_build_supervision(
                &commands::BuildSupervisionArgs {
                    kb,
                    stories: &story.stories,
                    split: story.split,
                    output,
                },
                &config,
            )?;
            Ok(serde_json::to_string_pretty(&s).expect("summary"))
        }
        Cmd::Train {
            silver,
            story,
            output,
            resume,
            ..
        } => {
            let r = commands::cmd_train(
                &commands::TrainArgs {
                    silver,
                    stories: &story.stories,
                    split: story.split,
                    output,
                    resume: resume.as_deref(),
                },
                &config,
            )?;
            let last = r.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN);
            Ok(format!(
                "{} examples, {} parameters, {} steps, final epoch loss {last:.4} -> {}",
                r.examples,
                r.parameters,
                r.step,
                output.display()
            ))
        }
        Cmd::Generate {
            checkpoint,
            story,
            output,
            variant,
            ..
        } => {
            let variant = variant.as_deref().map(parse_variant).transpose()?;
            let n = commands::cmd_generate(
                &commands::GenerateArgs {
                    checkpoint,
                    stories: &story.stories,
                    split: story.split,
                    output,
                    variant,
                },
                &config,
            )?;
            Ok(format!("{n} keys decoded -> {}", output.display()))
        }
        Cmd::Baseline {
            method,
            kb,
            story,
            output,
        } => {
            let n = commands::cmd_baseline(
                &commands::BaselineArgs {
                    method: *method,
                    kb,
                    stories: &story.stories,
                    split: story.split,
                    output,
                },
                &config,
            )?;
            Ok(format!("{n} inferences -> {}", output.display()))
        }
        Cmd::Evaluate {
            inferences,
            gold,
            kb,
            stories,
            output,
            plot,
            ..
        } => {
            let report = commands::cmd_evaluate(
                &commands::EvaluateArgs {
                    inferences,
                    gold,
                    kb,
                    stories,
                    output,
                    plot: plot.as_deref(),
                },
                &config,
            )?;
            Ok(report.table())
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
