//! `ctxseq` command-line front end: data generation, classifier training,
//! curriculum training, evaluation, chat, attention traces and robustness
//! probes.
//!
//! Exit codes: 0 success, 2 input or spec error, 3 numeric abort,
//! 4 compatibility error, 5 capability error.

mod common;
mod config;
mod data;
mod fit;
mod serve;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::common::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "ctxseq",
    version,
    about = "Context-conditioned sequence-to-sequence toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic topic-labeled corpus.
    GenData(data::GenDataArgs),
    /// Train the topic classifier with k-fold cross-validation.
    Classify(fit::ClassifyArgs),
    /// Train one or all decoder kinds through the curriculum.
    Train(fit::TrainArgs),
    /// Length-bucketed perplexity of a checkpoint on a test file.
    Eval(serve::EvalArgs),
    /// Interactive chat over stdin and stdout.
    Chat(serve::ChatArgs),
    /// Attention trace of one decoded input.
    Viz(serve::VizArgs),
    /// Response stability under input noise.
    Probe(serve::ProbeArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.exit_code();
        }
        if let Some(e) = cause.downcast_ref::<ctxseq::Error>() {
            return match e {
                ctxseq::Error::NumericAbort { .. } => 3,
                ctxseq::Error::Incompatible(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => data::gen_data(a),
        Command::Classify(a) => fit::classify(a),
        Command::Train(a) => fit::train(a),
        Command::Eval(a) => serve::eval(a),
        Command::Chat(a) => serve::chat(a),
        Command::Viz(a) => serve::viz(a),
        Command::Probe(a) => serve::probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
