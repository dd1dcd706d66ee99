mod commands;
mod inputs;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpgt_core::alignment::EvalMode;
use cpgt_core::metrics::AteAlignment;
use cpgt_core::Error;

/// Environment variable bounding the worker thread count.
pub const THREADS_ENV: &str = "CPGT_THREADS";

#[derive(Parser)]
#[command(name = "cpgt", version, about = "Control-point ground truth for visual-inertial trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Triangulate control points, align to the survey, and score.
    Evaluate(EvaluateArgs),
    /// Evaluate many sequences listed in a manifest and tabulate per group.
    Benchmark(BenchmarkArgs),
    /// Fuse visual, inertial and control-point constraints into a pseudo ground truth.
    Fuse(FuseArgs),
    /// Leave-one-out validation of the alignment uncertainty.
    Loocv(LoocvArgs),
    /// Generate a synthetic sequence in every supported file format.
    Synth(SynthArgs),
    /// Absolute trajectory error between two trajectory files.
    Ate(AteArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TwoD => EvalMode::TwoD,
            Mode::ThreeD => EvalMode::ThreeD,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Sim3,
    Se3,
    None,
}

impl From<AlignArg> for AteAlignment {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::Sim3 => AteAlignment::Sim3,
            AlignArg::Se3 => AteAlignment::Se3,
            AlignArg::None => AteAlignment::None,
        }
    }
}

#[derive(Args, Clone)]
struct SequenceInputs {
    /// Trajectory file (`timestamp_ns tx ty tz qx qy qz qw`).
    #[arg(long)]
    trajectory: PathBuf,
    /// Control point detections (`timestamp_ns,camera_id,cp_id,u,v`).
    #[arg(long)]
    detections: PathBuf,
    /// Surveyed control points (`id,dim,x,y,z,sigma_xy,sigma_z`).
    #[arg(long)]
    control_points: PathBuf,
    /// Rig calibration (TOML).
    #[arg(long)]
    calibration: PathBuf,
    /// Assumed standard deviation of detections, pixels.
    #[arg(long, default_value_t = 1.0)]
    pixel_sigma: f64,
}

#[derive(Args, Clone)]
struct AlignOptions {
    #[arg(long, value_enum, default_value = "2d")]
    mode: Mode,
    /// RANSAC inlier threshold, pixels.
    #[arg(long, default_value_t = 4.0)]
    threshold: f64,
    /// RANSAC seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    inputs: SequenceInputs,
    #[command(flatten)]
    align: AlignOptions,
    /// Repeat with seeds `seed..seed+runs` and report the spread.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Recording length in seconds; defaults to the span of the detections.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Write the comma-separated report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// CSV with columns `sequence,group,trajectory,detections,control_points,calibration,reference`
    /// (reference may be empty); paths are relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    align: AlignOptions,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 1.0)]
    pixel_sigma: f64,
    /// Per-run results are written here; the group table goes to standard output.
    #[arg(long)]
    runs_out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    inputs: SequenceInputs,
    /// IMU samples (`timestamp_ns,gx,gy,gz,ax,ay,az`).
    #[arg(long)]
    imu: PathBuf,
    /// Feature tracks (`track_id,timestamp_ns,camera_id,u,v`); required unless --inertial-only.
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long)]
    inertial_only: bool,
    /// Variance-factor reweighting rounds.
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Multiplier applied to control point covariances.
    #[arg(long, default_value_t = 0.25)]
    deflation: f64,
    /// Every n-th trajectory pose becomes a keyframe.
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// The input trajectory is already in the survey frame; skip the initial alignment.
    #[arg(long)]
    world_frame: bool,
    /// Output trajectory.
    #[arg(long)]
    out: PathBuf,
    /// Covariance sidecar; defaults to `<out>.cov.csv`.
    #[arg(long)]
    covariance: Option<PathBuf>,
    /// Whitened residual statistics and histograms per factor family.
    #[arg(long)]
    residuals: Option<PathBuf>,
}

#[derive(Args)]
struct LoocvArgs {
    #[command(flatten)]
    inputs: SequenceInputs,
    #[command(flatten)]
    align: AlignOptions,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// figure8, spline or platform.
    #[arg(long, default_value = "figure8")]
    preset: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    cp_count: Option<usize>,
    /// Pixel noise on control point detections.
    #[arg(long, default_value_t = 0.0)]
    detection_sigma: f64,
    /// Pixel noise on feature tracks.
    #[arg(long, default_value_t = 0.0)]
    feature_sigma: f64,
    /// Add IMU white noise and bias random walk at the rig's densities.
    #[arg(long)]
    imu_noise: bool,
    /// Perturb surveyed positions by their stated sigmas.
    #[arg(long)]
    cp_noise: bool,
    /// Position noise added to the estimate, meters.
    #[arg(long, default_value_t = 0.0)]
    perturb_pos: f64,
    /// Rotation noise added to the estimate, degrees.
    #[arg(long, default_value_t = 0.0)]
    perturb_rot_deg: f64,
    /// Linear scale drift of the estimate, per second.
    #[arg(long, default_value_t = 0.0)]
    scale_drift: f64,
}

#[derive(Args)]
struct AteArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "sim3")]
    align: AlignArg,
    /// Timestamp association tolerance, milliseconds.
    #[arg(long, default_value_t = 1.0)]
    tol_ms: f64,
}

/// Formats an error as one `kind: message` line.
fn diagnostic(e: &Error) -> String {
    let text = e.to_string().replace('\n', " ");
    let kind = e.kind();
    match text.strip_prefix(kind).and_then(|t| t.strip_prefix(": ")) {
        Some(rest) => format!("{kind}: {rest}"),
        None => format!("{kind}: {text}"),
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    let mut stdout = std::io::stdout().lock();
    let text = match cli.command {
        Command::Evaluate(a) => commands::evaluate(&a)?,
        Command::Benchmark(a) => commands::benchmark(&a)?,
        Command::Fuse(a) => commands::fuse(&a)?,
        Command::Loocv(a) => commands::loocv(&a)?,
        Command::Synth(a) => commands::synth(&a)?,
        Command::Ate(a) => commands::ate(&a)?,
    };
    stdout.write_all(text.as_bytes())?;
    stdout.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| writeln!(buf, "{}: {}", record.level().as_str().to_lowercase(), record.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage-error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::from(if e.is_degenerate() { 2 } else { 1 })
        }
    }
}
