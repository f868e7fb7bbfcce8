mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Common, Kind, Settings};

/// Multi-view self-supervised denoising: corruption synthesis, training,
/// inference and benchmarking.
#[derive(Parser, Debug)]
#[command(name = "mvd", version, propagate_version = true)]
struct Cli {
    /// Root seed; every random draw of the run derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Replay file location (each command has a default next to its output).
    #[arg(long, global = true, value_name = "PATH")]
    replay: Option<PathBuf>,

    /// Omit wall-clock timings from progress output so that stdout and
    /// stderr are byte-identical across runs too.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply a corruption (or a pool draw) to an image or a folder of images.
    Corrupt(CorruptArgs),
    /// Train, resume or fine-tune a model.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Run a benchmark grid file.
    Eval(EvalArgs),
    /// Super-resolution protocol: bicubic downscale-upscale inputs.
    SrEval(SrEvalArgs),
    /// Inpainting protocol: randomly dropped pixels.
    InpaintEval(InpaintEvalArgs),
    /// Run the mixing-invariance and noise-statistics suites.
    Verify(VerifyArgs),
    /// Re-run the invocation recorded in a replay file.
    Replay { file: PathBuf },
}

#[derive(Args, Debug)]
struct CorruptArgs {
    /// Input PNG/JPEG/BMP file or folder.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Output file (for a file input) or folder.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Corruption family, e.g. gaussian, poisson, downscale, drop_mask.
    #[arg(long, conflicts_with = "pool", required_unless_present = "pool")]
    family: Option<String>,
    /// Family parameter as key=value, e.g. sigma=25. Repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Resampling kernel for downscale: bicubic, lanczos, bilinear, hamming.
    #[arg(long)]
    kernel: Option<String>,
    /// Draw a corruption per image from a pool: `noise`, `identity`, an
    /// inline pool with `;`-separated lines, or a pool file.
    #[arg(long)]
    pool: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key = value training config.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config override as key=value. Repeatable; applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory for logs and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a checkpoint, using its stored configuration.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["finetune_from", "config"])]
    resume: Option<PathBuf>,
    /// Initialize the networks this schema trains from a pretrained checkpoint.
    #[arg(long, value_name = "CKPT")]
    finetune_from: Option<PathBuf>,
    /// Total number of steps (overrides the config).
    #[arg(long)]
    iters: Option<u64>,
    /// Print a progress line every N steps (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// Input image or folder.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Output image or folder.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Process in tiles of this size (pixels).
    #[arg(long)]
    tile: Option<usize>,
    /// Overlap between neighbouring tiles.
    #[arg(long, default_value_t = 32)]
    overlap: usize,
    /// Keep-mask PNG (white = known pixel) for models that take one.
    #[arg(long, value_name = "PNG")]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Benchmark grid file.
    #[arg(long, value_name = "FILE")]
    grid: PathBuf,
    /// Grid override as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output folder for results.csv, results.txt and plots.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    /// Checkpoint as path, name=path, or `identity`. Repeatable.
    #[arg(long = "ckpt", value_name = "CKPT", required = true)]
    ckpts: Vec<String>,
    /// Image folder or toy:COUNT:SIZE:SEED.
    #[arg(long, value_name = "SRC")]
    data: String,
    /// Which images to use: all, train, val or test.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, default_value_t = 32)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct SrEvalArgs {
    #[command(flatten)]
    common: ProtocolArgs,
    /// Downscale factors.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    scales: Vec<usize>,
}

#[derive(Args, Debug)]
struct InpaintEvalArgs {
    #[command(flatten)]
    common: ProtocolArgs,
    /// Fractions of dropped pixels.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9")]
    ratios: Vec<f64>,
    /// Score PSNR on dropped pixels only.
    #[arg(long)]
    masked_only: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run the latent-mixing distribution suite.
    #[arg(long)]
    lemma1: bool,
    /// Run the noise-statistics suite.
    #[arg(long)]
    noise_stats: bool,
    /// Monte-Carlo samples per mixing case.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Multiplier on every tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let common = Common {
        seed: cli.seed,
        replay: cli.replay,
        deterministic: cli.deterministic,
    };
    let kind: Kind = match cli.command {
        Command::Corrupt(a) => commands::CorruptSettings::from_args(&common, a)?.into(),
        Command::Train(a) => commands::TrainSettings::from_args(&common, a)?.into(),
        Command::Denoise(a) => commands::DenoiseSettings::from_args(a)?.into(),
        Command::Eval(a) => commands::EvalSettings::from_grid_args(&common, a)?.into(),
        Command::SrEval(a) => commands::EvalSettings::from_sr_args(&common, a)?.into(),
        Command::InpaintEval(a) => commands::EvalSettings::from_inpaint_args(&common, a)?.into(),
        Command::Verify(a) => commands::VerifySettings::from_args(&common, a).into(),
        Command::Replay { file } => {
            if common.seed.is_some() || common.deterministic {
                return Err(CliError::Usage(
                    "replay takes its seed and mode from the replay file".into(),
                ));
            }
            return Settings::from_replay(&file)?.execute(common.replay.as_deref());
        }
    };
    let settings = Settings {
        kind,
        deterministic: common.deterministic,
    };
    settings.execute(common.replay.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
