//! Command-line front end: data generation, mask learning, benchmark masks,
//! fixed-mask training, evaluation and gradient verification.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data,
//! file-format or verification failures.

mod commands;
pub mod config;
mod outputs;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use loupe::data::Orientation;
use loupe::masks::ReadoutAxis;
use loupe::training::LossKind;

pub use config::{MaskConfig, MaskKind, RunConfig, SlopeGrid};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(loupe::Error),
    /// A verification ran but did not meet its tolerance.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Check(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl From<loupe::Error> for CliError {
    fn from(e: loupe::Error) -> Self {
        CliError::Data(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "loupe", version, about = "Learned k-space under-sampling masks and U-Net reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset
    GenData(GenDataArgs),
    /// Jointly learn a sampling mask and a reconstruction network
    TrainLoupe(TrainLoupeArgs),
    /// Train a reconstruction network behind a fixed binary mask
    TrainRecon(TrainReconArgs),
    /// Generate a benchmark binary mask
    MakeMask(MakeMaskArgs),
    /// Turn a probability mask into a binary mask
    BinarizeMask(BinarizeArgs),
    /// Score reconstructions with MSE, MAE, HFEN, PSNR and SSIM
    Evaluate(EvaluateArgs),
    /// Compare pipeline gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Train over a grid of sigmoid slopes and tabulate validation loss
    SlopeGrid(SlopeGridArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override it [default: none]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; more than one evaluates batch elements in parallel [default: 1]
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReadoutArg {
    Rows,
    Columns,
}

impl From<ReadoutArg> for ReadoutAxis {
    fn from(r: ReadoutArg) -> Self {
        match r {
            ReadoutArg::Rows => ReadoutAxis::Rows,
            ReadoutArg::Columns => ReadoutAxis::Columns,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Magnitude,
    Complex,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrientationArg {
    Horizontal,
    Vertical,
    Isotropic,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset directory [default: data]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of volumes [default: 12]
    #[arg(long)]
    pub volumes: Option<usize>,
    /// Slices per volume [default: 25]
    #[arg(long)]
    pub slices: Option<usize>,
    /// Image height [default: 64]
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Preferred direction of ellipse major axes [default: horizontal]
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationArg>,
    /// Mean major/minor axis ratio [default: 4]
    #[arg(long)]
    pub aspect_ratio: Option<f64>,
    /// Minimum ellipses per slice [default: 3]
    #[arg(long)]
    pub min_ellipses: Option<usize>,
    /// Maximum ellipses per slice [default: 8]
    #[arg(long)]
    pub max_ellipses: Option<usize>,
    /// Per-channel noise standard deviation [default: 0.005]
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Validation volumes [default: 1]
    #[arg(long)]
    pub val_volumes: Option<usize>,
    /// Test volumes [default: 1]
    #[arg(long)]
    pub test_volumes: Option<usize>,
    /// Also write 16-bit magnitude PGMs under <out>/pgm [default: false]
    #[arg(long)]
    pub export_pgm: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory or volume manifest [default: data]
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Target sampling fraction [default: 0.25]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Maximum epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size; partial batches are dropped [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Network learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Cap on optimizer steps per epoch [default: whole split]
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Training loss [default: magnitude]
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// U-Net pooling stages [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// U-Net channels after the first stage [default: 16]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Add the network input to its output [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub residual: Option<bool>,
    /// Write elapsed seconds to the history [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub record_wall_time: Option<bool>,
}

#[derive(Args, Debug, Clone)]
pub struct MaskLearningArgs {
    /// Mask logit learning rate [default: same as --lr]
    #[arg(long)]
    pub mask_lr: Option<f64>,
    /// Slope of the probability sigmoid [default: 5]
    #[arg(long)]
    pub slope_t: Option<f64>,
    /// Slope of the relaxed threshold sigmoid [default: 200]
    #[arg(long)]
    pub slope_s: Option<f64>,
    /// Monte Carlo mask draws per example [default: 1]
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Learn one probability per phase-encode line [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub line_constrained: Option<bool>,
    /// Readout direction of line-constrained masks [default: rows]
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutArg>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainLoupeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub mask: MaskLearningArgs,
    /// Output directory [default: run]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainReconArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Binary mask PGM (required)
    #[arg(long, value_name = "FILE")]
    pub mask: PathBuf,
    /// Output directory [default: recon]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MakeMaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// Generator [default: uniform]
    #[arg(long, value_enum)]
    pub kind: Option<MaskKind>,
    /// Sampling fraction [default: 0.25]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Grid height [default: 64]
    #[arg(long)]
    pub height: Option<usize>,
    /// Grid width [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Variable-density exponent [default: 3]
    #[arg(long)]
    pub power: Option<f64>,
    /// Fully sampled center lines of cartesian masks [default: 0]
    #[arg(long)]
    pub center_lines: Option<usize>,
    /// Readout direction of cartesian masks [default: rows]
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutArg>,
    /// Dataset whose training volumes feed the spectrum mask [default: data]
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output PGM; a JSON sidecar is written beside it [default: mask.pgm]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BinarizeArg {
    Topk,
    Bernoulli,
}

#[derive(Args, Debug, Clone)]
pub struct BinarizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Probability mask PGM (required)
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Sampling fraction [default: from the input sidecar]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Selection rule [default: topk]
    #[arg(long, value_enum)]
    pub mode: Option<BinarizeArg>,
    /// Select whole lines along this readout direction [default: per point]
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutArg>,
    /// Output PGM [default: mask.pgm]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Binary mask PGM used with --weights [default: none]
    #[arg(long, value_name = "FILE")]
    pub mask: Option<PathBuf>,
    /// Network checkpoint manifest used with --mask [default: none]
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Dataset directory or volume manifest [default: data]
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Dataset split to score [default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Predicted volume manifest, scored against --target [default: none]
    #[arg(long, value_name = "FILE")]
    pub prediction: Option<PathBuf>,
    /// Reference volume manifest for --prediction [default: none]
    #[arg(long, value_name = "FILE")]
    pub target: Option<PathBuf>,
    /// Metrics CSV [default: metrics.csv]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Image side length; must be even [default: 8]
    #[arg(long)]
    pub size: Option<usize>,
    /// U-Net channels of the depth-1 check network [default: 2]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Coordinates probed per tensor [default: 16]
    #[arg(long)]
    pub probes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SlopeGridArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub mask: MaskLearningArgs,
    /// Comma-separated threshold slopes [default: 50,100,200]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub s_values: Option<Vec<f64>>,
    /// Comma-separated probability slopes [default: 1,5,10]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub t_values: Option<Vec<f64>>,
    /// Output CSV [default: slope_grid.csv]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(a) => &a.common,
            Command::TrainLoupe(a) => &a.common,
            Command::TrainRecon(a) => &a.common,
            Command::MakeMask(a) => &a.common,
            Command::BinarizeMask(a) => &a.common,
            Command::Evaluate(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
            Command::SlopeGrid(a) => &a.common,
        }
    }
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Magnitude => LossKind::Magnitude,
            LossArg::Complex => LossKind::Complex,
        }
    }
}

impl From<OrientationArg> for Orientation {
    fn from(o: OrientationArg) -> Self {
        match o {
            OrientationArg::Horizontal => Orientation::Horizontal,
            OrientationArg::Vertical => Orientation::Vertical,
            OrientationArg::Isotropic => Orientation::Isotropic,
        }
    }
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command on a pool of `--threads` workers.
pub fn execute(command: Command) -> Result<(), CliError> {
    let threads = command.common().threads.unwrap_or(1);
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| commands::dispatch(command, threads))
}
