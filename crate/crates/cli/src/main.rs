use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dualintent_cli::{run, Command, Invocation};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Synth,
    Train,
    Eval,
    Export,
    CheckGrads,
    Sweep,
}

/// Joint search and recommendation with generated demand intents.
#[derive(Debug, Parser)]
#[command(name = "dualintent-sr", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Flat key = value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing synthesized data.
    #[arg(long)]
    force: bool,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let command = match args.command {
        Cmd::Synth => Command::Synth,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Export => Command::Export,
        Cmd::CheckGrads => Command::CheckGrads,
        Cmd::Sweep => Command::Sweep,
    };
    let inv = Invocation {
        command,
        config: args.config,
        force: args.force,
        seed: args.seed,
    };
    match run(&inv) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
