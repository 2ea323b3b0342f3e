use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curriculum_cli::{config::DEFAULTS_SUMMARY, Stage};

#[derive(Parser)]
#[command(name = "curriculum", version, about = "Build a difficulty-ordered training curriculum", after_help = DEFAULTS_SUMMARY)]
struct Cli {
    /// Pipeline config file (`key = value` lines).
    #[arg(short, long, global = true, default_value = "curriculum.conf")]
    config: PathBuf,
    /// Override a config key, e.g. `--set schedule.p=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Rebuild even when outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Read the source files into a single sentence table.
    Ingest,
    /// Train the BPE vocabulary and encode the corpus.
    Tokenize,
    /// Partition sentences into balanced metasets.
    Split,
    /// Score every sentence with the teachers that did not see it.
    CrossReview,
    /// Order sentences from easiest to hardest.
    Rank,
    /// Write the per-step batch manifest.
    Schedule,
    /// Domain proportions, difficulty correlates, agreement and exposure.
    Analyze,
    /// Minimal-pair accuracy of a teacher.
    EvalPairs,
    /// Garden-path surprisal effects of a teacher.
    EvalSap,
    /// Every stage in order, then any configured evaluations.
    All,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Tokenize => Stage::Tokenize,
            Command::Split => Stage::Split,
            Command::CrossReview => Stage::CrossReview,
            Command::Rank => Stage::Rank,
            Command::Schedule => Stage::Schedule,
            Command::Analyze => Stage::Analyze,
            Command::EvalPairs => Stage::EvalPairs,
            Command::EvalSap => Stage::EvalSap,
            Command::All => return None,
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match curriculum_cli::run(&cli.config, &cli.overrides, cli.command.stage(), cli.force) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
