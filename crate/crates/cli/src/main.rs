//! `autoloop`: scene generation, loop database building, fine-tuning,
//! evaluation and the pre-computation cost model.
//!
//! Exit codes: 0 success, 1 user or input error, 2 internal failure.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs.
    User(String),
    /// A broken invariant inside the pipeline.
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::User(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) => write!(f, "error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "autoloop", version, about = "Loop-closure-aware fine-tuning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes with ground-truth revisits.
    GenScenes(GenScenesArgs),
    /// Build the offline loop-pair database from feature files.
    BuildDb(BuildDbArgs),
    /// Fine-tune the surrogate model on one scene.
    Train(TrainArgs),
    /// Absolute trajectory error of one estimate, or the median over runs.
    Eval(EvalArgs),
    /// Pre-computation FLOP estimate.
    Cost(CostArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The 20-scene planted-revisit corpus (`--scenes` to change the count).
    Corpus,
    /// The single fine-tuning benchmark scene.
    Drift,
}

#[derive(Args, Debug)]
pub struct GenScenesArgs {
    /// JSON file `{"scenes": [ ... ]}` of scene specs.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    /// Overrides scene seeds: scene `k` gets `seed + k`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildDbArgs {
    /// Directory holding `<scene>.features` files.
    #[arg(long)]
    pub scenes: PathBuf,
    /// JSON file of build parameters; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_inliers: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub exclusion: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainPreset {
    Default,
    /// Step size tuned for the drift benchmark scene.
    Benchmark,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlignArg {
    Rigid,
    Sim,
}

impl From<AlignArg> for autoloop_core::eval::AlignMode {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::Rigid => autoloop_core::eval::AlignMode::Rigid,
            AlignArg::Sim => autoloop_core::eval::AlignMode::Similarity,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `<scene>.scene.json` written by gen-scenes.
    #[arg(long)]
    pub scene: PathBuf,
    /// Loop database (JSON lines) written by build-db.
    #[arg(long)]
    pub db: PathBuf,
    /// JSON trainer config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TrainPreset::Default)]
    pub preset: TrainPreset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cadence: Option<usize>,
    #[arg(long, value_enum)]
    pub agent: Option<Switch>,
    /// Fixed loop weight; requires `--agent off`.
    #[arg(long)]
    pub w_loop: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = AlignArg::Sim)]
    pub align: AlignArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long, conflicts_with = "runs", required_unless_present = "runs")]
    pub est: Option<PathBuf>,
    /// Directory of train run directories, each holding `trajectory.tum`.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = AlignArg::Sim)]
    pub align: AlignArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long)]
    pub frames: u64,
    /// Number of sequences of `--frames` frames each.
    #[arg(long, default_value_t = 1)]
    pub scenes: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenScenes(a) => commands::gen_scenes(&a),
        Command::BuildDb(a) => commands::build_db(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Cost(a) => commands::cost(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AUTOLOOP_LOG", "warn")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors; bad usage is a user error.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(2),
    }
}
