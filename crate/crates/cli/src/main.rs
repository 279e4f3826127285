use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emocaps::{Error, ErrorKind};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "emocaps", version, about = "Multimodal emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest, writing checkpoints, the loss log and test metrics.
    Train(Common),
    /// Score a checkpoint on a labeled manifest.
    Eval(Common),
    /// Write per-utterance label probabilities for a manifest.
    Predict(Common),
    /// Train one model per modality setting and report test F1 for each.
    Ablate(Common),
    /// Compare analytic gradients with finite differences on a toy model.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset with planted class signal.
    Synth(Common),
}

/// Flags shared by every subcommand. They override the `--config` file,
/// which in turn overrides the preset.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// iemocap, meld or custom.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Modality set such as `T+V+A`; `ablate` takes a comma list.
    #[arg(long)]
    pub modalities: Option<String>,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory or index file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Predict(c) => commands::predict(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Gradcheck(g) => commands::gradcheck(&g.common, g.step, g.corrupt_gradient),
        Command::Synth(c) => commands::synth(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
