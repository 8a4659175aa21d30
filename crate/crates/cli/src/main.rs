//! `craft` — one binary wiring the pipeline stages together: normalize a
//! corpus, generate the instruction dataset, fine-tune adapters, build
//! the retrieval index, grade a reader, and render result tables.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use craft_cli::config::ResolvedConfig;
use craft_cli::{commands, CliError};
use craft_core::adapters::TrainMode;
use craft_core::eval::EvalMode;

#[derive(Parser)]
#[command(
    name = "craft",
    version,
    about = "Synthetic-data fine-tuning pipeline: ingest, generate, train, index, eval, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the global [run] seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainModeArg {
    /// Low-rank adapters on a frozen base
    Lora,
    /// Full-parameter baseline
    Full,
}

impl From<TrainModeArg> for TrainMode {
    fn from(arg: TrainModeArg) -> Self {
        match arg {
            TrainModeArg::Lora => TrainMode::Lora,
            TrainModeArg::Full => TrainMode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    /// Prompt with each record's golden chunk
    Golden,
    /// Retrieve top-k chunks from the index
    Rag,
}

impl From<EvalModeArg> for EvalMode {
    fn from(arg: EvalModeArg) -> Self {
        match arg {
            EvalModeArg::Golden => EvalMode::Golden,
            EvalModeArg::Rag => EvalMode::Rag,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Normalize raw documents and QA records into the corpus artifact
    Ingest(Common),
    /// Generate the synthetic instruction dataset via the chat client
    Generate(Common),
    /// Fine-tune on the generated dataset (adapters or full baseline)
    Train {
        #[command(flatten)]
        common: Common,
        /// Training mode; overrides [training] mode
        #[arg(long, value_enum)]
        mode: Option<TrainModeArg>,
    },
    /// Embed corpus chunks and build the vector index
    Index(Common),
    /// Grade the reader over the corpus QA records
    Eval {
        #[command(flatten)]
        common: Common,
        /// Context mode; overrides [eval] mode
        #[arg(long, value_enum)]
        mode: Option<EvalModeArg>,
        /// Row label for this model in reports; overrides [eval] model_label
        #[arg(long, value_name = "STR")]
        model_label: Option<String>,
    },
    /// Render stored evaluation or training reports as one table
    Report {
        #[command(flatten)]
        common: Common,
        /// Report JSON files to combine
        #[arg(required = true, value_name = "REPORT_FILE")]
        reports: Vec<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |common: &Common| ResolvedConfig::load(&common.config, common.seed);
    match &cli.command {
        Cmd::Ingest(common) => commands::cmd_ingest(&load(common)?),
        Cmd::Generate(common) => commands::cmd_generate(&load(common)?),
        Cmd::Train { common, mode } => {
            commands::cmd_train(&load(common)?, mode.map(TrainMode::from))
        }
        Cmd::Index(common) => commands::cmd_index(&load(common)?),
        Cmd::Eval {
            common,
            mode,
            model_label,
        } => commands::cmd_eval(
            &load(common)?,
            mode.map(EvalMode::from),
            model_label.clone(),
        ),
        Cmd::Report { common, reports } => commands::cmd_report(&load(common)?, reports),
    }
}
