//! `birads`: synthetic data generation, training, evaluation, cross-validation,
//! ablations and gradient verification for the dual-view fusion model.

mod args;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use args::{ModelArgs, TrainArgs};
use commands::VerificationFailed;

#[derive(Parser, Debug)]
#[command(name = "birads", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-view dataset with descriptor metadata.
    SynthGen(SynthGenCmd),
    /// Train one model on a dataset or on the training part of a fold.
    Train(TrainCmd),
    /// Evaluate a checkpoint and write metrics and ROC points.
    Eval(EvalCmd),
    /// Stratified k-fold cross-validation.
    Cv(CvCmd),
    /// Cross-validated ablation tables.
    Ablate(AblateCmd),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug)]
pub struct SynthGenCmd {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub n_cases: usize,
    /// Strength of the descriptor–label dependence in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train on the training part of this fold instead of all cases.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only the test part of this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Seed of the fold plan; must match the training run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expected architecture; a checkpoint that differs is rejected.
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct CvCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Maximum number of folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblateMode {
    Cv,
    Wiring,
    Layers,
    Aug,
}

impl AblateMode {
    pub fn name(self) -> &'static str {
        match self {
            AblateMode::Cv => "cv",
            AblateMode::Wiring => "wiring",
            AblateMode::Layers => "layers",
            AblateMode::Aug => "aug",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            AblateMode::Cv => "cv",
            AblateMode::Wiring => "ablate-wiring",
            AblateMode::Layers => "ablate-layers",
            AblateMode::Aug => "ablate-aug",
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateCmd {
    #[arg(long, value_enum)]
    pub mode: AblateMode,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Layer counts for `--mode layers`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// The three resize targets for `--mode aug`.
    #[arg(long, value_delimiter = ',')]
    pub aug_sizes: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    /// Preset name or `key=value` file.
    #[arg(long, default_value = "minimal")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Descriptor vocabulary; defaults to the seven mass classes.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory for the manifest and per-group report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scale every ReLU gradient by this factor (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthGen(c) => commands::synth_gen(&c)?,
        Command::Train(c) => commands::train(&c)?,
        Command::Eval(c) => commands::eval(&c)?,
        Command::Cv(c) => commands::cv(&c)?,
        Command::Ablate(c) => commands::ablate(&c)?,
        Command::Gradcheck(c) => commands::gradcheck(&c)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<VerificationFailed>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
