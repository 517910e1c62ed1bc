//! `duplex`: corpus generation, training, evaluation, sampling and
//! structural checks for the duplex model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "duplex", version, about = "Reversible duplex Conformer with duplex diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel unit corpus as JSON lines.
    GenData(GenDataArgs),
    /// Run training stages and write metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus with greedy and beam decoding.
    Eval(EvalArgs),
    /// Draw canvases with the reverse diffusion chain.
    Sample(SampleArgs),
    /// Translate there and back and report cycle errors.
    Roundtrip(RoundtripArgs),
    /// Show the sub-module order and per-layer reconstruction error.
    Inspect(InspectArgs),
    /// Run the invertibility, schedule and CTC property suites.
    Selftest,
}

/// Seed flag shared by every randomized command.
#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Falls back to DPLX_SEED, then to the config file or 0.
    #[arg(long, env = "DPLX_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    pairs: usize,
    /// Matches the default model vocabulary.
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, value_enum, default_value_t = DifficultyArg::ReverseShift)]
    difficulty: DifficultyArg,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Copy,
    Shift,
    ReverseShift,
    LocalSwapStretch,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    stage: StageArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Checkpoint directory (or run directory) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Sets both unit vocabularies.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    k3: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Fwd,
    Rev,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    direction: DirectionArg,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Which hash split of the corpus to score.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleDirection {
    Fwd,
    Rev,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Linear,
    ScaledLinear,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pairs supplying the conditioning side and the target lengths.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SampleDirection::Fwd)]
    direction: SampleDirection,
    /// Diffusion steps; defaults to the trained schedule's.
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    /// Schedule shape; defaults to the trained schedule's.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, default_value_t = 4)]
    count: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Xyx,
    Yxy,
    Both,
}

#[derive(Args)]
struct RoundtripArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = OrderArg::Both)]
    order: OrderArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Print the palindromic sub-module chain of both directions.
    #[arg(long)]
    chain: bool,
    /// Use this checkpoint's stack instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Depth of a fresh stack.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Width of a fresh stack.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[command(flatten)]
    seed: SeedArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // Usage errors exit with 2; help and version with 0.
        Err(e) => e.exit(),
    };
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let body = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
