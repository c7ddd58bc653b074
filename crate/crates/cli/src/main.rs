//! `mtkd`: train, distill, augment and evaluate offensive-language models.
//!
//! Exit status: 0 success, 1 usage error, 2 data, configuration or
//! validation error, 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtkd_core::eval::ReportFormat;
use mtkd_core::TaskId;

#[derive(Parser, Debug)]
#[command(name = "mtkd", version, about = "Multi-task knowledge distillation for offensive language")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (for `synth`, the corpus seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the supervised term in distillation.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Distillation temperature for tasks without their own.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Steps over which MTKD-TA anneals λ from 0 to 1.
    #[arg(long)]
    pub lambda_steps: Option<u64>,
    /// Comma-separated task list, e.g. `offense,sexism`.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<TaskId>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune one model on one task.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "offense")]
        task: TaskId,
    },
    /// Distill a half-depth student from a single-task teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "offense")]
        task: TaskId,
        /// Teacher checkpoint; one is fine-tuned first when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train one shared encoder on several tasks.
    Mtl {
        #[command(flatten)]
        common: Common,
    },
    /// Multi-task student distilled from single-task teachers.
    Mtkd {
        #[command(flatten)]
        common: Common,
        /// Directory of `<task>.ckpt` teachers; trained when absent.
        #[arg(long)]
        teachers: Option<PathBuf>,
    },
    /// MTKD with teacher annealing.
    #[command(name = "mtkd-ta")]
    MtkdTa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teachers: Option<PathBuf>,
    },
    /// Apply the configured text augmentations to a task's corpus.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "offense")]
        task: TaskId,
        #[arg(long)]
        output: PathBuf,
        /// Write ASDA mask positions here as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the checkpoint's only head, or offense.
        #[arg(long)]
        task: Option<TaskId>,
        /// Defaults to `<checkpoint>.vocab`.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// MTL, MTKD and MTKD-TA over every task subset.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run the grid cells on all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Write synthetic corpora to the configured task paths.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> commands::Outcome {
    use commands::*;
    match cli.command {
        Command::Train { common, task } => train(&common, task),
        Command::Distill { common, task, teacher } => distill(&common, task, teacher.as_deref()),
        Command::Mtl { common } => mtl(&common),
        Command::Mtkd { common, teachers } => mtkd(&common, false, teachers.as_deref()),
        Command::MtkdTa { common, teachers } => mtkd(&common, true, teachers.as_deref()),
        Command::Augment {
            common,
            task,
            output,
            report,
        } => augment(&common, task, &output, report.as_deref()),
        Command::Eval {
            common: _,
            checkpoint,
            data,
            task,
            vocab,
            format,
        } => eval(&checkpoint, &data, task, vocab.as_deref(), format),
        Command::Ablate { common, parallel } => ablate(&common, parallel),
        Command::Synth { common } => synth(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
