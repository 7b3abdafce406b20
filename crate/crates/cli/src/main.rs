//! `asr`: corpus preparation, training, and decoding from one binary.
//!
//! Every subcommand reads settings the same way: built-in defaults, then an
//! optional JSON config file, then command-line flags, later layers winning.
//! Progress and diagnostics go to stderr; stdout carries only the payload
//! (evaluation report, transcription).
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing files, malformed
//! inputs), 2 internal error (an invariant the tool itself must uphold).

mod commands;
mod config;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::process::ExitCode;

/// User errors are actionable by the caller; internal errors are bugs.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::audio::AudioError> for CliError {
    fn from(e: asr_core::audio::AudioError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::features::FeatureError> for CliError {
    fn from(e: asr_core::features::FeatureError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::text::TextError> for CliError {
    fn from(e: asr_core::text::TextError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::lm::LmError> for CliError {
    fn from(e: asr_core::lm::LmError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::manifest::ManifestError> for CliError {
    fn from(e: asr_core::manifest::ManifestError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::augment::AugmentError> for CliError {
    fn from(e: asr_core::augment::AugmentError) -> Self {
        CliError::user(e.to_string())
    }
}

impl From<asr_core::model::ModelError> for CliError {
    fn from(e: asr_core::model::ModelError) -> Self {
        CliError::internal(e.to_string())
    }
}

impl From<asr_core::ctc::CtcError> for CliError {
    fn from(e: asr_core::ctc::CtcError) -> Self {
        CliError::internal(e.to_string())
    }
}

impl From<asr_core::train::TrainError> for CliError {
    fn from(e: asr_core::train::TrainError) -> Self {
        use asr_core::train::TrainError;
        match e {
            TrainError::Model(_) | TrainError::Ctc(_) => CliError::internal(e.to_string()),
            _ => CliError::user(e.to_string()),
        }
    }
}

impl From<asr_core::eval::EvalError> for CliError {
    fn from(e: asr_core::eval::EvalError) -> Self {
        use asr_core::eval::EvalError;
        match e {
            EvalError::Model(_) | EvalError::Ctc(_) => CliError::internal(e.to_string()),
            _ => CliError::user(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "asr", version, about = "Accent-adaptation speech recognition workflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a corpus, convert audio, and write split manifests
    Prepare(commands::PrepareArgs),
    /// Train the acoustic model, writing per-epoch checkpoints
    Train(commands::TrainArgs),
    /// Score a manifest against a checkpoint and write reports
    Evaluate(commands::EvaluateArgs),
    /// Print the transcription of one WAV file
    Transcribe(commands::TranscribeArgs),
    /// Train the character n-gram model used for beam rescoring
    LmTrain(commands::LmTrainArgs),
    /// Re-check manifests against the files on disk
    Validate(commands::ValidateArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(args) => commands::run_prepare(args),
        Command::Train(args) => commands::run_train(args),
        Command::Evaluate(args) => commands::run_evaluate(args),
        Command::Transcribe(args) => commands::run_transcribe(args),
        Command::LmTrain(args) => commands::run_lm_train(args),
        Command::Validate(args) => commands::run_validate(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
