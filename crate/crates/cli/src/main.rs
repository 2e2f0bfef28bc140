mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(
    name = "floatfuse",
    version,
    about = "Snapshot ToF + stereo depth pipeline"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "FLOATFUSE_THREADS")]
    threads: Option<usize>,
    /// Pipeline configuration JSON; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic snapshot bundle.
    Synth(SynthArgs),
    /// Decode a raw ToF directory to depth and confidence.
    Tof(TofArgs),
    /// Recover the main-camera calibration of one snapshot.
    Calibrate(CalibrateArgs),
    /// Fuse stereo and ToF into ultrawide depth.
    Fuse(FuseArgs),
    /// Compare an estimated depth map with ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    /// Textured desk with boxes in front of a wall.
    Desk,
    /// Desk with large untextured panels.
    Textureless,
    /// A single fronto-parallel plane at 1.2 m.
    Plane,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SceneKind::Textureless)]
    pub scene: SceneKind,
    /// No sensor noise at all.
    #[arg(long)]
    pub noiseless: bool,
    /// Keep the main camera at its factory calibration.
    #[arg(long)]
    pub no_perturb: bool,
    /// ToF depth noise at the median amplitude (m).
    #[arg(long)]
    pub tof_noise: Option<f64>,
    /// Image noise (8-bit gray levels).
    #[arg(long)]
    pub image_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TofArgs {
    #[arg(long)]
    pub raw: PathBuf,
    /// Depth PFM; confidence goes to `<stem>_conf.pfm` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the valid points (rig frame) as ASCII PLY.
    #[arg(long)]
    pub ply: Option<PathBuf>,
    /// Rig JSON for the PLY export; defaults to `rig.json` next to the raw directory.
    #[arg(long)]
    pub rig: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Raw-UW → raw-FM flow (3-channel PFM) replacing dense matching.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output camera JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Use this main-camera calibration instead of calibrating.
    #[arg(long, conflicts_with = "ignore_ois")]
    pub calib: Option<PathBuf>,
    /// Fuse with the factory main-camera calibration.
    #[arg(long)]
    pub ignore_ois: bool,
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ToF injection weight (0 = stereo only).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Disparity search range at full resolution (px).
    #[arg(long)]
    pub dmax: Option<usize>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "2", "4"]))]
    pub scale: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Failures after argument parsing: bad or missing data.
const EXIT_DATA: u8 = 2;
const EXIT_USAGE: u8 = 1;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(EXIT_DATA)
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            PipelineConfig::from_json(&text)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(n) = cli.threads {
        cfg.threads = n;
    }
    commands::apply_overrides(&mut cfg, &cli.command);
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()?;
    match &cli.command {
        Command::Synth(args) => commands::synth(args, &cfg),
        Command::Tof(args) => commands::tof(args, &cfg),
        Command::Calibrate(args) => commands::calibrate(args, &cfg),
        Command::Fuse(_) => commands::fuse(&cfg),
        Command::Eval(args) => commands::eval(args),
    }
}
