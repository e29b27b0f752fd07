//! `m2vae` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "m2vae", version, about = "Multi-view VAE for cold-start item recommendation")]
struct Cli {
    /// Default parent directory for run outputs.
    #[arg(long, global = true, env = "M2VAE_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a clustered synthetic dataset on disk.
    Synth(SynthArgs),
    /// Train one model and evaluate it on the test cold items.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and compare model variants over several seeds.
    Ablate(AblateArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Numerically check the fusion inequalities.
    Verify(VerifyArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub interactions_per_user: Option<usize>,
    #[arg(long)]
    pub subtypes: Option<usize>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write image features as text instead of the binary container.
    #[arg(long)]
    pub text_features: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to the config's `output_dir`, then `<output-root>/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs are complete, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config; defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    /// Where to write the report; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated variant names; defaults to the config's list.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Comma-separated seeds; defaults to the config's list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hyperparameter to vary; defaults to the config's `[sweep] parameter`.
    #[arg(long)]
    pub parameter: Option<String>,
    /// Comma-separated values; defaults to the config's `[sweep] grid`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON array of `{"q": [q1, q2], "alpha": [a1, a2]}` cases checked as well.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Monte Carlo draws per replicate for the ELBO comparison; 0 skips it.
    #[arg(long, default_value_t = 20_000)]
    pub elbo_samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Run config whose `[train]` table supplies loss weights and architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the analytic gradient of this tensor's largest entry by 1.1.
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let root = cli.output_root;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, &root),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a, &root),
        Command::Sweep(a) => commands::sweep(&a, &root),
        Command::Verify(a) => commands::verify(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_status(&e))
        }
    }
}
