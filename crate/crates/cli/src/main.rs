//! `latgeo`: synthesize scenes, train, fine-tune, caption, score and
//! inspect the label-attention geometry captioner.

mod ablate;
mod common;
mod error;
mod infer;
mod manifest;
mod settings;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "latgeo", version, about = "Label-attention transformer captioner with box geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes with reference captions
    Synth(synth::SynthArgs),
    /// Cross-entropy training with early stopping on CIDEr-D
    Train(train::TrainArgs),
    /// Self-critical fine-tuning from a cross-entropy checkpoint
    Rl(train::RlArgs),
    /// Caption scenes with a trained checkpoint
    Caption(infer::CaptionArgs),
    /// Score candidate captions against scene references
    Eval(infer::EvalArgs),
    /// Write every attention map for one scene as CSV
    AttnDump(infer::AttnArgs),
    /// Finite-difference check of every gradient
    Gradcheck(infer::GradcheckArgs),
    /// Train and score a grid of model variants
    Ablate(ablate::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::train(a),
        Command::Rl(a) => train::rl(a),
        Command::Caption(a) => infer::caption(a),
        Command::Eval(a) => infer::eval(a),
        Command::AttnDump(a) => infer::attn_dump(a),
        Command::Gradcheck(a) => infer::gradcheck(a),
        Command::Ablate(a) => ablate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
