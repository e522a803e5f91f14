mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seg_core::parallel::{set_threads, Exec};
use seg_core::SegError;

use crate::args::{AblateArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "seg", version, about = "Entity-aware gated relation extraction over sentence bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted label noise.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint: AUC, P@N and the PR curve.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every variant with shared seeds.
    Ablate(AblateArgs),
}

/// Bad input the user can fix: configs, arguments, data files.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// 1 for validation failures, 2 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<SegError>() {
            return match e {
                SegError::Config(_)
                | SegError::Usage(_)
                | SegError::Parse { .. }
                | SegError::Data(_)
                | SegError::VocabMismatch { .. }
                | SegError::Lookup { .. }
                | SegError::Shape { .. } => 1,
                SegError::NonFinite(_) | SegError::Checkpoint(_) | SegError::Io { .. } | SegError::Json(_) => 2,
            };
        }
    }
    2
}

/// `SEG_THREADS` workers (default 1); more than one selects the parallel path.
fn configure_threads() -> anyhow::Result<(usize, Exec)> {
    let threads = match std::env::var("SEG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Invalid(format!("SEG_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    set_threads(threads);
    let exec = if threads > 1 { Exec::Parallel } else { Exec::Sequential };
    Ok((threads, exec))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (threads, exec) = configure_threads()?;
    let env = commands::Env { threads, exec };
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &env),
        Command::Train(a) => commands::train(&a, &env),
        Command::Eval(a) => commands::eval(&a, &env),
        Command::Gradcheck(a) => commands::gradcheck(&a, &env),
        Command::Ablate(a) => commands::ablate(&a, &env),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
