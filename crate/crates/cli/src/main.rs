use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ildr_cli::commands;
use ildr_cli::config::{parse_override, RunConfig};
use ildr_cli::CliError;

#[derive(Parser)]
#[command(
    name = "ildr",
    about = "Incremental LDR memory: closed-loop transcription training, review, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// config file (flat key = value with [sections])
    #[arg(long)]
    config: Option<PathBuf>,
    /// override one key, e.g. --set train.batch_size=32 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// shorthand for --set run.seed=...
    #[arg(long)]
    seed: Option<u64>,
    /// shorthand for --set run.out_dir=...
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// shorthand for --set run.data_dir=...
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?,
            None => String::new(),
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        for s in &self.set {
            overrides.push(parse_override(s)?);
        }
        if let Some(seed) = self.seed {
            overrides.push(("run.seed".into(), seed.to_string()));
        }
        if let Some(dir) = &self.out_dir {
            overrides.push(("run.out_dir".into(), dir.display().to_string()));
        }
        if let Some(dir) = &self.data_dir {
            overrides.push(("run.data_dir".into(), dir.display().to_string()));
        }
        RunConfig::from_text(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train all classes together with the joint minimax objective
    TrainJoint {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Class-incremental training over the configured task splits
    TrainIncremental {
        #[command(flatten)]
        config: ConfigArgs,
        /// continue from a checkpoint instead of starting fresh
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Weakly supervised review cycles over all learned classes
    Review {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        cycles: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Nearest-subspace evaluation plus affinity and correlation exports
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export auto-encoding and principal-component replay image grids
    ReplayExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// how many eval samples to transcribe in the panel
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Finite-difference verification of every analytic gradient
    Gradcheck {
        /// comma-separated seeds (default 0,1,2,3,4)
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainJoint { config } => commands::cmd_train(config.resolve()?, true),
        Command::TrainIncremental {
            config,
            resume_from,
        } => match resume_from {
            Some(path) => commands::cmd_train_resume(&path, config.out_dir.clone()),
            None => commands::cmd_train(config.resolve()?, false),
        },
        Command::Review {
            checkpoint,
            cycles,
            out_dir,
            set,
        } => {
            let overrides = set
                .iter()
                .map(|s| parse_override(s))
                .collect::<Result<Vec<_>, _>>()?;
            commands::cmd_review(&checkpoint, cycles, out_dir, &overrides)
        }
        Command::Eval {
            checkpoint,
            out_dir,
        } => commands::cmd_eval(&checkpoint, out_dir),
        Command::ReplayExport {
            checkpoint,
            out_dir,
            samples,
        } => commands::cmd_replay_export(&checkpoint, out_dir, samples),
        Command::Gradcheck { seeds } => commands::cmd_gradcheck(&seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
