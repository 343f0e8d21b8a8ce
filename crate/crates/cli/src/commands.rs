use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use posefield::metrics;
use posefield::motion_render::{field_to_sequence, write_ppm_sequence};
use posefield::plucker::{motion_field, sparse_grid};
use posefield::pose_io::parse_sequence;
use posefield::pose_vae::{self, block_aligned_render, render_clip, TrainConfig};
use posefield::selftest;
use posefield::tai::{run_injection_demo, DemoConfig};
use posefield::tensor::write_tensor;
use posefield::trajectory::{describe, generate, TrajectorySpec};
use posefield::{PoseSequence, RenderConfig, SampleGrid, VaeParams};

use crate::{CammcArgs, EncodeArgs, GenTrajArgs, InjectDemoArgs, RenderArgs, TrainVaeArgs};

/// Bad invocation detected after argument parsing; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Learning rate of the full-scale diffusion fine-tune; recorded, not used.
const DIFFUSION_LR: f64 = 5e-5;

/// Run metadata echoed into JSON outputs.
#[derive(Debug, Serialize)]
struct RunConfig {
    width: u32,
    height: u32,
    stride: u32,
    max_magnitude: f64,
    lr: f64,
    guidance_scale: f64,
    seed: u64,
    out_dir: PathBuf,
}

fn read_sequence(path: &Path) -> Result<PoseSequence> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_sequence(&text).with_context(|| format!("parsing {}", path.display()))
}

fn grid_for(r: &RenderArgs) -> Result<SampleGrid> {
    Ok(sparse_grid(r.width, r.height, r.stride, r.stride)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_traj(a: &GenTrajArgs) -> Result<ExitCode> {
    let spec = TrajectorySpec::new(a.kind, a.frames, a.speed)
        .map_err(|e| UsageError(e.to_string()))?
        .with_seed(a.seed);
    let seq = generate(&spec)?;
    fs::write(&a.out, posefield::pose_io::serialize_sequence(&seq))
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", describe(&spec));
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EncodeSummary {
    poses: usize,
    frames: usize,
    grid: [usize; 2],
    ppm_files: usize,
    clip_shape: [usize; 4],
    latent_shape: [usize; 4],
    checkpoint: Option<PathBuf>,
    config: RunConfig,
}

pub fn encode(a: &EncodeArgs) -> Result<ExitCode> {
    let seq = read_sequence(&a.pose_file)?;
    let grid = grid_for(&a.render)?;
    let field = motion_field(&seq, &grid)?;
    let view = RenderConfig::new(
        a.render.width as usize,
        a.render.height as usize,
        a.render.max_magnitude,
    );
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let written = write_ppm_sequence(&field_to_sequence(&field, &view)?, &a.out_dir, "motion")?;

    let clip = render_clip(
        &seq,
        &grid,
        &block_aligned_render(&grid, a.render.max_magnitude),
    )?;
    let params = match &a.checkpoint {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            VaeParams::load(&mut BufReader::new(file))
                .with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            eprintln!(
                "warning: no --checkpoint given, encoding with untrained weights (seed {})",
                a.seed
            );
            VaeParams::init(clip.channels(), a.seed)
        }
    };
    let (mean, _) = pose_vae::encode(&clip, &params)?;
    let mut out = BufWriter::new(File::create(a.out_dir.join("latent.txt"))?);
    write_tensor(&mean, &mut out)?;
    out.flush()?;

    let summary = EncodeSummary {
        poses: seq.len(),
        frames: field.n_motion_frames,
        grid: [grid.cols(), grid.rows()],
        ppm_files: written.len(),
        clip_shape: clip.shape(),
        latent_shape: clip.latent_shape(),
        checkpoint: a.checkpoint.clone(),
        config: RunConfig {
            width: a.render.width,
            height: a.render.height,
            stride: a.render.stride,
            max_magnitude: a.render.max_magnitude,
            lr: DIFFUSION_LR,
            guidance_scale: a.guidance_scale,
            seed: a.seed,
            out_dir: a.out_dir.clone(),
        },
    };
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    total: f64,
    recon_mse: f64,
    kl: f64,
}

#[derive(Serialize)]
struct LossHistory {
    files: Vec<String>,
    steps: usize,
    lr: f64,
    beta: f64,
    seed: u64,
    history: Vec<StepRecord>,
}

fn pose_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| UsageError(format!("cannot read {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn train_vae(a: &TrainVaeArgs) -> Result<ExitCode> {
    let files = pose_files(&a.data_dir)?;
    if files.is_empty() {
        return Err(UsageError(format!("no .txt pose files in {}", a.data_dir.display())).into());
    }
    let grid = grid_for(&a.render)?;
    let render = block_aligned_render(&grid, a.render.max_magnitude);
    let clips = files
        .iter()
        .map(|f| {
            let seq = read_sequence(f)?;
            render_clip(&seq, &grid, &render).with_context(|| format!("rendering {}", f.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = clips.iter().position(|c| c.shape() != clips[0].shape()) {
        bail!(
            "{} renders to {:?} but {} renders to {:?}; all files need the same pose count",
            files[bad].display(),
            clips[bad].shape(),
            files[0].display(),
            clips[0].shape()
        );
    }
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        beta: a.beta,
        seed: a.seed,
    };
    let (params, history) = pose_vae::train(&clips, &cfg)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("vae.ckpt");
    let mut out = BufWriter::new(File::create(&ckpt)?);
    params.save(&mut out)?;
    out.flush()?;
    let record = LossHistory {
        files: files
            .iter()
            .map(|f| {
                f.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
        steps: cfg.steps,
        lr: cfg.lr,
        beta: cfg.beta,
        seed: cfg.seed,
        history: history
            .iter()
            .enumerate()
            .map(|(step, s)| StepRecord {
                step,
                total: s.total,
                recon_mse: s.recon_mse,
                kl: s.kl,
            })
            .collect(),
    };
    write_json(&a.out.join("loss_history.json"), &record)?;
    let (first, last) = (&history[0], &history[history.len() - 1]);
    println!(
        "{} clips, {} steps: recon_mse {:.6} -> {:.6}, checkpoint {}",
        clips.len(),
        cfg.steps,
        first.recon_mse,
        last.recon_mse,
        ckpt.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn inject_demo(a: &InjectDemoArgs) -> Result<ExitCode> {
    let cfg = DemoConfig {
        patches: a.patches,
        frames: a.frames,
        features: a.features,
        latent_rows: a.latent_rows,
        latent_cols: a.latent_cols,
        hidden: a.hidden,
        seed: a.seed,
        zero_pose: a.zero_pose,
    };
    let report = run_injection_demo(a.strategy, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.grad_check_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

pub fn cammc(a: &CammcArgs) -> Result<ExitCode> {
    let (x, y) = (read_sequence(&a.a)?, read_sequence(&a.b)?);
    let report = metrics::cammc(&x, &y)?;
    println!("{}", report.to_json());
    Ok(ExitCode::SUCCESS)
}

pub fn selftest() -> Result<ExitCode> {
    let results = selftest::run_checks(&selftest::default_checks());
    let color = std::env::var_os("NO_COLOR").is_none() && io::stdout().is_terminal();
    print!("{}", selftest::format_table(&results, color));
    Ok(if selftest::all_passed(&results) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
