//! `posefield` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posefield::trajectory::TrajectoryKind;
use posefield::InjectionStrategy;

use commands::UsageError;

#[derive(Parser)]
#[command(
    name = "posefield",
    version,
    about = "Camera-pose conditioning toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory in RealEstate10K format.
    GenTraj(GenTrajArgs),
    /// Render a pose file's motion field and encode it to a pose latent.
    Encode(EncodeArgs),
    /// Train the motion VAE on every pose file in a directory.
    TrainVae(TrainVaeArgs),
    /// Run one injection strategy on seeded tensors and check its gradients.
    InjectDemo(InjectDemoArgs),
    /// Camera motion consistency between two pose files.
    Cammc(CammcArgs),
    /// Run the built-in invariant suite.
    Selftest,
}

fn parse_kind(s: &str) -> Result<TrajectoryKind, String> {
    s.parse()
        .map_err(|e: posefield::trajectory::TrajectoryError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<InjectionStrategy, String> {
    s.parse()
        .map_err(|e: posefield::tai::TaiError| e.to_string())
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn positive_u32(s: &str) -> Result<u32, String> {
    match s.parse::<u32>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
pub struct GenTrajArgs {
    /// pan-left, pan-right, pan-up, pan-down, zoom-in, zoom-out, roundabout or shake
    #[arg(value_parser = parse_kind)]
    pub kind: TrajectoryKind,
    #[arg(long, default_value_t = 17, value_parser = positive_usize)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub speed: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Image geometry shared by encode and train-vae.
#[derive(Args, Clone, Copy)]
pub struct RenderArgs {
    #[arg(long, default_value_t = 640, value_parser = positive_u32)]
    pub width: u32,
    #[arg(long, default_value_t = 360, value_parser = positive_u32)]
    pub height: u32,
    /// Grid stride in pixels, both axes.
    #[arg(long, default_value_t = 40, value_parser = positive_u32)]
    pub stride: u32,
    /// Flow magnitude in pixels mapped to full color saturation.
    #[arg(long, default_value_t = 32.0, value_parser = positive_f64)]
    pub max_magnitude: f64,
}

#[derive(Args)]
pub struct EncodeArgs {
    pub pose_file: PathBuf,
    #[command(flatten)]
    pub render: RenderArgs,
    /// VAE checkpoint from train-vae; untrained weights are used without one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "encoded")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Recorded in the summary only.
    #[arg(long, default_value_t = 7.0, value_parser = positive_f64)]
    pub guidance_scale: f64,
}

#[derive(Args)]
pub struct TrainVaeArgs {
    /// Directory of `.txt` pose files.
    pub data_dir: PathBuf,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long, default_value_t = 500, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value_t = posefield::pose_vae::DEFAULT_VAE_LR, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "vae-run")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct InjectDemoArgs {
    /// tai, concat or cross-attn
    #[arg(value_parser = parse_strategy)]
    pub strategy: InjectionStrategy,
    /// Zero pose latent with identity scale and zero shift.
    #[arg(long)]
    pub zero_pose: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6, value_parser = positive_usize)]
    pub patches: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub frames: usize,
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    pub features: usize,
    #[arg(long, default_value_t = 2, value_parser = positive_usize)]
    pub latent_rows: usize,
    #[arg(long, default_value_t = 3, value_parser = positive_usize)]
    pub latent_cols: usize,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub hidden: usize,
}

#[derive(Args)]
pub struct CammcArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

/// Error chain joined with `: `, skipping causes already quoted by the
/// message above them.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTraj(a) => commands::gen_traj(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::TrainVae(a) => commands::train_vae(&a),
        Command::InjectDemo(a) => commands::inject_demo(&a),
        Command::Cammc(a) => commands::cammc(&a),
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
