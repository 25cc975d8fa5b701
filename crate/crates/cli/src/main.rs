//! `seqflow` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqflow::Error;

#[derive(Debug, Parser)]
#[command(name = "seqflow", version, about = "Subtrajectory-balance alignment of toy token policies")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy and write metrics.jsonl plus final.ckpt.
    Train(commands::TrainArgs),
    /// Print sampled sequences, one per line.
    Sample(commands::SampleArgs),
    /// Uncertainty ratio, per-utterance CSV and correlation statistics.
    Analyze(commands::AnalyzeArgs),
    /// Exact TV/KL between a policy's terminal distribution and the target.
    Oracle(commands::OracleArgs),
    /// Noisy-copy hallucination benchmark, aligned versus baseline.
    Bench(commands::BenchArgs),
    /// Write a synthetic corpus.
    GenCorpus(commands::GenCorpusArgs),
    /// Train with one stabilization component removed.
    Ablate(commands::AblateArgs),
    /// Print the fully merged configuration for a preset or config file.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "lro1500")]
        preset: String,
    },
}

/// Exit codes: 2 config, 3 data, 4 runtime invariant.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::Parse { .. } | Error::Checkpoint(_) | Error::Io(_) => (3, "data"),
        Error::Validation(_) | Error::State(_) | Error::Budget { .. } => (4, "runtime"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("seqflow: error code=2 kind=usage: {first}");
            return ExitCode::from(2);
        }
    };
    if cli.sequential {
        seqflow::par::set_parallel(false);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a, None),
        Command::Sample(a) => commands::sample(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Bench(a) => commands::bench(a),
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ShowConfig { config, preset } => commands::show_config(config, &preset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("seqflow: error code={code} kind={kind}: {e}");
            ExitCode::from(code)
        }
    }
}
