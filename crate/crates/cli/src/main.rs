use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use serde::Serialize;

use foresight::dpo::ToyPolicy;
use foresight::eval_stats::TTestKind;
use foresight::pipeline::{self, PipelineConfig, PipelineError};
use foresight::reranker::LabelMode;
use foresight::synthetic::SyntheticSpec;

#[derive(Parser)]
#[command(name = "foresight", version, about = "Self-play forecasting pipeline: data, preference pairs, toy DPO, evaluation")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw questions into the question store.
    Ingest(ConfigArg),
    /// Generate queries, search and summarize news for train and test questions.
    FetchNews(ConfigArg),
    /// Sample two differing reasoning traces per training question.
    Selfplay(ConfigArg),
    /// Order each trace pair by distance to the resolved outcome.
    Rank {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_mode)]
        label_mode: Option<LabelMode>,
        /// Seed for randomized orientations.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the preference dataset and its manifest.
    EmitDpo {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_mode)]
        label_mode: Option<LabelMode>,
    },
    /// Train the toy policy on an emitted dataset.
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_mode)]
        label_mode: Option<LabelMode>,
        /// Trainer seed (split and shuffling).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Forecast the test questions with a toy policy or the chat endpoint.
    Forecast {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Model tag recorded with each forecast and used as the file name.
        #[arg(long)]
        tag: String,
        /// A saved toy policy.
        #[arg(long, conflicts_with = "chat", required_unless_present = "chat")]
        policy: Option<PathBuf>,
        /// Ask the configured chat endpoint instead.
        #[arg(long)]
        chat: bool,
    },
    /// Score forecast files and compare every pair of tags.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Tags to compare; all forecast files when omitted.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        /// Pooled-variance t-tests instead of Welch.
        #[arg(long)]
        pooled: bool,
    },
    /// Write a synthetic corpus with recorded transcripts and a replay config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticSpec::default().seed)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<LabelMode, String> {
    match s {
        "true_outcome" | "true" => Ok(LabelMode::TrueOutcome),
        "randomized" | "random" => Ok(LabelMode::Randomized),
        _ => Err(format!("unknown label mode `{s}` (true_outcome | randomized)")),
    }
}

fn load(c: &ConfigArg) -> Result<PipelineConfig, PipelineError> {
    PipelineConfig::load(&c.config)
}

fn emit<T: Serialize>(value: &T) -> Result<(), PipelineError> {
    let line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    println!("{line}");
    Ok(())
}

fn load_policy(path: &Path) -> Result<ToyPolicy, PipelineError> {
    ToyPolicy::load(path).map_err(|e| PipelineError::Config(format!("cannot load policy {}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest(c) => {
            let cfg = load(&c)?;
            emit(&pipeline::ingest(&cfg)?)
        }
        Command::FetchNews(c) => {
            let cfg = load(&c)?;
            let chat = pipeline::chat_endpoint(&cfg.chat)?;
            let news = pipeline::news_endpoint(&cfg.news)?;
            emit(&pipeline::fetch_news(&cfg, &chat, &news)?)
        }
        Command::Selfplay(c) => {
            let cfg = load(&c)?;
            let chat = pipeline::chat_endpoint(&cfg.chat)?;
            emit(&pipeline::selfplay(&cfg, &chat)?)
        }
        Command::Rank { cfg, label_mode, seed } => {
            let cfg = load(&cfg)?;
            let mode = label_mode.unwrap_or(cfg.rank.label_mode);
            let (_, manifest) = pipeline::rank(&cfg, mode, seed.unwrap_or(cfg.seed))?;
            emit(&manifest)
        }
        Command::EmitDpo { cfg, label_mode } => {
            let cfg = load(&cfg)?;
            let mode = label_mode.unwrap_or(cfg.rank.label_mode);
            emit(&pipeline::emit_dpo(&cfg, mode)?)
        }
        Command::TrainToy {
            cfg,
            label_mode,
            seed,
            epochs,
            learning_rate,
        } => {
            let cfg = load(&cfg)?;
            let mode = label_mode.unwrap_or(cfg.rank.label_mode);
            let mut dpo = cfg.dpo.clone();
            if let Some(s) = seed {
                dpo.seed = s;
            }
            if let Some(e) = epochs {
                dpo.epochs = e;
            }
            if let Some(lr) = learning_rate {
                dpo.learning_rate = lr;
            }
            let out = pipeline::train_toy(&cfg, mode, &dpo)?;
            emit(&out.report.epochs)
        }
        Command::Forecast {
            cfg,
            tag,
            policy,
            chat,
        } => {
            let cfg = load(&cfg)?;
            let records = if chat {
                let endpoint = pipeline::chat_endpoint(&cfg.chat)?;
                pipeline::forecast_chat(&cfg, &endpoint, &tag)?
            } else {
                let path = policy.expect("clap requires --policy without --chat");
                pipeline::forecast_toy(&cfg, &load_policy(&path)?, &tag)?
            };
            emit(&serde_json::json!({ "tag": tag, "count": records.len() }))
        }
        Command::Evaluate { cfg, tags, pooled } => {
            let cfg = load(&cfg)?;
            let tags = if tags.is_empty() { pipeline::forecast_tags(&cfg)? } else { tags };
            let kind = if pooled { TTestKind::Pooled } else { TTestKind::Welch };
            let report = pipeline::evaluate(&cfg, &tags, kind)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Synth { out, seed } => {
            let spec = SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            };
            pipeline::synth(&spec, &out)?;
            emit(&serde_json::json!({ "config": out.join("config.toml") }))
        }
    }
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            error!("{e}");
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": e.code(), "exit_code": code })
            );
            ExitCode::from(code as u8)
        }
    }
}
