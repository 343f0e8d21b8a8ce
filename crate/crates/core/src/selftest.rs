//! Built-in invariant suite behind `posefield selftest`.
//!
//! Each check is a named function returning a short detail string on success
//! or a failure message. Seeds are fixed, so output is identical across runs.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::metrics::cammc;
use crate::plucker::{plucker_ray, sparse_grid};
use crate::pose_io::{parse_sequence, serialize_sequence, CameraIntrinsics, CameraPose};
use crate::pose_vae::{self, MotionClip, TrainConfig, VaeParams};
use crate::rng::SeededRng;
use crate::tai::{
    self, AttnParams, DemoConfig, InjectionStrategy, GRAD_CHECK_EPS, GRAD_CHECK_TOLERANCE,
};
use crate::tensor::{self, finite_diff_check, finite_diff_check_all, Tensor, LAYER_NORM_EPS};
use crate::trajectory::{generate, TrajectoryKind, TrajectorySpec};

pub type CheckFn = fn() -> Result<String, String>;

#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn default_checks() -> Vec<Check> {
    vec![
        Check {
            name: "plucker-invariants",
            run: plucker_invariants,
        },
        Check {
            name: "grid-law",
            run: grid_law,
        },
        Check {
            name: "latent-shape",
            run: latent_shape,
        },
        Check {
            name: "layer-norm-reference",
            run: layer_norm_reference,
        },
        Check {
            name: "grad-layer-norm",
            run: grad_layer_norm,
        },
        Check {
            name: "grad-mlp",
            run: grad_mlp,
        },
        Check {
            name: "grad-attention",
            run: grad_attention,
        },
        Check {
            name: "grad-temporal-block",
            run: grad_temporal_block,
        },
        Check {
            name: "grad-tai",
            run: || grad_injection(InjectionStrategy::Tai),
        },
        Check {
            name: "grad-concat",
            run: || grad_injection(InjectionStrategy::Concat),
        },
        Check {
            name: "grad-cross-attn",
            run: || grad_injection(InjectionStrategy::CrossAttn),
        },
        Check {
            name: "grad-elbo",
            run: grad_elbo,
        },
        Check {
            name: "grad-diffusion-loss",
            run: grad_diffusion_loss,
        },
        Check {
            name: "tai-reduction",
            run: tai_reduction,
        },
        Check {
            name: "pose-round-trip",
            run: pose_round_trip,
        },
        Check {
            name: "cammc-closed-form",
            run: cammc_closed_form,
        },
        Check {
            name: "vae-determinism",
            run: vae_determinism,
        },
    ]
}

/// Runs every check, turning panics into failures.
pub fn run_checks(checks: &[Check]) -> Vec<CheckResult> {
    checks
        .iter()
        .map(|c| {
            let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                Err(format!("panic: {msg}"))
            });
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(e) => (false, e),
            };
            CheckResult {
                name: c.name.to_string(),
                passed,
                detail,
            }
        })
        .collect()
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Fixed-width table, one row per check, plus a summary line.
pub fn format_table(results: &[CheckResult], color: bool) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let status = match (r.passed, color) {
            (true, true) => "\x1b[32mPASS\x1b[0m",
            (false, true) => "\x1b[31mFAIL\x1b[0m",
            (true, false) => "PASS",
            (false, false) => "FAIL",
        };
        let _ = writeln!(out, "{status}  {:width$}  {}", r.name, r.detail);
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        let _ = writeln!(out, "{} checks passed", results.len());
    } else {
        let _ = writeln!(
            out,
            "{} of {} checks failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        );
    }
    out
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grad_ok(name: &str, err: f64) -> Result<String, String> {
    ensure(err < GRAD_CHECK_TOLERANCE, || {
        format!("{name} max rel err {err:.3e}")
    })?;
    Ok(format!("max rel err {err:.2e}"))
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_pose(rng: &mut SeededRng) -> CameraPose {
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let r: Matrix3<f64> = *Rotation3::new(axis).matrix();
    let t = Vector3::new(
        rng.uniform_range(-5.0, 5.0),
        rng.uniform_range(-5.0, 5.0),
        rng.uniform_range(-5.0, 5.0),
    );
    CameraPose::new(r, t).expect("rotation from axis-angle")
}

fn plucker_invariants() -> Result<String, String> {
    let mut rng = SeededRng::new(11);
    let draws = 2000;
    let (mut worst_dot, mut worst_norm) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let pose = random_pose(&mut rng);
        let k = CameraIntrinsics::new(
            rng.uniform_range(0.3, 2.0),
            rng.uniform_range(0.3, 2.0),
            rng.uniform_range(0.2, 0.8),
            rng.uniform_range(0.2, 0.8),
        )
        .map_err(e2s)?;
        let (x, y) = (rng.uniform_range(0.0, 640.0), rng.uniform_range(0.0, 360.0));
        let ray = plucker_ray(&pose, &k, x, y, 640.0, 360.0).map_err(e2s)?;
        worst_dot = worst_dot.max(ray.direction.dot(&ray.moment).abs());
        worst_norm = worst_norm.max((ray.direction.norm() - 1.0).abs());
    }
    ensure(worst_dot < 1e-9 && worst_norm < 1e-12, || {
        format!("|d.m| {worst_dot:.2e}, ||d||-1 {worst_norm:.2e}")
    })?;
    Ok(format!("{draws} rays, |d.m| <= {worst_dot:.1e}"))
}

fn grid_law() -> Result<String, String> {
    for (stride, cols, rows) in [(20, 32, 18), (40, 16, 9), (80, 8, 4)] {
        let g = sparse_grid(640, 360, stride, stride).map_err(e2s)?;
        ensure(
            g.cols() == cols && g.rows() == rows && g.len() == cols * rows,
            || format!("stride {stride}: {}x{}", g.cols(), g.rows()),
        )?;
    }
    Ok("640x360 strides 20/40/80 -> 32x18, 16x9, 8x4".into())
}

fn latent_shape() -> Result<String, String> {
    let clip = MotionClip::from_padded(Tensor::zeros(&[16, 80, 48, 3])).map_err(e2s)?;
    let (mean, _) = pose_vae::encode(&clip, &VaeParams::init(3, 0)).map_err(e2s)?;
    ensure(mean.shape() == [4, 10, 6, 4], || {
        format!("latent {:?}", mean.shape())
    })?;
    for raw in [[17, 9, 16, 3], [2, 3, 5, 6], [5, 33, 7, 3]] {
        let clip = pose_vae::pad_clip(&Tensor::zeros(&raw)).map_err(e2s)?;
        let s = clip.shape();
        let (mean, _) = pose_vae::encode(&clip, &VaeParams::zeros(raw[3])).map_err(e2s)?;
        ensure(mean.shape() == [s[0] / 4, s[1] / 8, s[2] / 8, 4], || {
            format!("{raw:?} -> {:?}", mean.shape())
        })?;
    }
    Ok("[16,80,48,3] -> [4,10,6,4]".into())
}

fn layer_norm_reference() -> Result<String, String> {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).map_err(e2s)?;
    let y = tensor::layer_norm(&x, LAYER_NORM_EPS).map_err(e2s)?;
    let s = (1.5f64).sqrt();
    let want = [-s, 0.0, s];
    let err = y
        .data()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-4, || format!("[1,2,3] off by {err:.2e}"))?;
    Ok(format!("[1,2,3] within {err:.1e}"))
}

fn grad_layer_norm() -> Result<String, String> {
    let mut rng = SeededRng::new(21);
    let x = Tensor::randn(&[4, 8], 1.5, &mut rng);
    let r = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let analytic = tensor::layer_norm_backward(&x, LAYER_NORM_EPS, &r).map_err(e2s)?;
    let err = finite_diff_check(
        |x| Ok(tensor::layer_norm(x, LAYER_NORM_EPS)?.dot(&r)),
        &x,
        &analytic,
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("layer_norm", err)
}

fn grad_mlp() -> Result<String, String> {
    let mut rng = SeededRng::new(22);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let inputs = vec![
        x,
        Tensor::randn(&[4, 6], 0.5, &mut rng),
        Tensor::randn(&[6], 0.1, &mut rng),
        Tensor::randn(&[6, 3], 0.5, &mut rng),
        Tensor::randn(&[3], 0.1, &mut rng),
    ];
    let r = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let g = tensor::mlp_backward(
        &inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4], &r,
    )
    .map_err(e2s)?;
    let err = finite_diff_check_all(
        &inputs,
        &[g.x, g.w1, g.b1, g.w2, g.b2],
        |t| Ok(tensor::mlp_forward(&t[0], &t[1], &t[2], &t[3], &t[4])?.dot(&r)),
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("mlp", err)
}

fn grad_attention() -> Result<String, String> {
    let mut rng = SeededRng::new(23);
    let inputs = vec![
        Tensor::randn(&[4, 6], 1.0, &mut rng),
        Tensor::randn(&[5, 6], 1.0, &mut rng),
        Tensor::randn(&[5, 3], 1.0, &mut rng),
    ];
    let r = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let (dq, dk, dv) =
        tensor::attention_backward(&inputs[0], &inputs[1], &inputs[2], &r).map_err(e2s)?;
    let err = finite_diff_check_all(
        &inputs,
        &[dq, dk, dv],
        |t| Ok(tensor::attention(&t[0], &t[1], &t[2])?.dot(&r)),
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("attention", err)
}

fn grad_temporal_block() -> Result<String, String> {
    let mut rng = SeededRng::new(24);
    let z = Tensor::randn(&[3, 4, 6], 1.0, &mut rng);
    let params = AttnParams::random(6, &mut rng);
    let r = Tensor::randn(&[3, 4, 6], 1.0, &mut rng);
    let g = tai::temporal_attention_block_backward(&z, &params, &r).map_err(e2s)?;
    let inputs = vec![
        z,
        params.wq.value.clone(),
        params.wk.value.clone(),
        params.wv.value.clone(),
    ];
    let err = finite_diff_check_all(
        &inputs,
        &[g.z, g.attn.wq, g.attn.wk, g.attn.wv],
        |t| {
            let mut p = params.clone();
            p.wq.value = t[1].clone();
            p.wk.value = t[2].clone();
            p.wv.value = t[3].clone();
            tai::temporal_attention_block(&t[0], &p)
                .map(|o| o.dot(&r))
                .map_err(|e| tensor::TensorError::InvalidArgument(e.to_string()))
        },
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("temporal block", err)
}

fn grad_injection(strategy: InjectionStrategy) -> Result<String, String> {
    let cfg = DemoConfig {
        seed: 25,
        ..DemoConfig::default()
    };
    let report = tai::run_injection_demo(strategy, &cfg).map_err(e2s)?;
    ensure(report.output_shape == report.input_shape, || {
        format!(
            "shape {:?} -> {:?}",
            report.input_shape, report.output_shape
        )
    })?;
    grad_ok(strategy.name(), report.grad_check_max_rel_err)
}

fn grad_elbo() -> Result<String, String> {
    let mut rng = SeededRng::new(26);
    let clip = MotionClip::from_padded(Tensor::randn(&[4, 8, 8, 1], 0.5, &mut rng)).map_err(e2s)?;
    let mut params = VaeParams::init(1, 27);
    params.enc_b.value = Tensor::randn(&[8], 0.1, &mut rng);
    params.dec_b.value = Tensor::randn(&[256], 0.1, &mut rng);
    let (beta, seed) = (0.5, 28);
    let (_, g) = pose_vae::loss_and_grads(&clip, &params, beta, seed).map_err(e2s)?;
    let inputs = vec![
        params.enc_w.value.clone(),
        params.enc_b.value.clone(),
        params.dec_w.value.clone(),
        params.dec_b.value.clone(),
    ];
    let err = finite_diff_check_all(
        &inputs,
        &[g.enc_w, g.enc_b, g.dec_w, g.dec_b],
        |t| {
            let mut p = params.clone();
            p.enc_w.value = t[0].clone();
            p.enc_b.value = t[1].clone();
            p.dec_w.value = t[2].clone();
            p.dec_b.value = t[3].clone();
            pose_vae::loss_and_grads(&clip, &p, beta, seed)
                .map(|(l, _)| l.total)
                .map_err(|e| tensor::TensorError::InvalidArgument(e.to_string()))
        },
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("elbo", err)
}

fn grad_diffusion_loss() -> Result<String, String> {
    let mut rng = SeededRng::new(29);
    let pred = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let eps = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let analytic = tai::diffusion_loss_grad(&pred, &eps).map_err(e2s)?;
    let err = finite_diff_check(
        |p| {
            tai::diffusion_loss(p, &eps)
                .map_err(|e| tensor::TensorError::InvalidArgument(e.to_string()))
        },
        &pred,
        &analytic,
        GRAD_CHECK_EPS,
    )
    .map_err(e2s)?;
    grad_ok("diffusion loss", err)
}

fn tai_reduction() -> Result<String, String> {
    let report = tai::run_injection_demo(
        InjectionStrategy::Tai,
        &DemoConfig {
            zero_pose: true,
            seed: 30,
            ..DemoConfig::default()
        },
    )
    .map_err(e2s)?;
    let diff = report.layer_norm_baseline_diff.unwrap_or(f64::INFINITY);
    ensure(diff < 1e-12, || {
        format!("differs from layer norm by {diff:.2e}")
    })?;
    Ok(format!("max abs diff {diff:.1e}"))
}

fn pose_round_trip() -> Result<String, String> {
    for kind in TrajectoryKind::ALL {
        let spec = TrajectorySpec::new(kind, 9, 0.07)
            .map_err(e2s)?
            .with_seed(31);
        let text = serialize_sequence(&generate(&spec).map_err(e2s)?);
        let again = serialize_sequence(&parse_sequence(&text).map_err(e2s)?);
        ensure(text == again, || {
            format!("{kind} text changed after round trip")
        })?;
    }
    Ok(format!("{} trajectory kinds", TrajectoryKind::ALL.len()))
}

fn cammc_closed_form() -> Result<String, String> {
    let s = 0.05;
    let left =
        generate(&TrajectorySpec::new(TrajectoryKind::PanLeft, 8, s).map_err(e2s)?).map_err(e2s)?;
    let right = generate(&TrajectorySpec::new(TrajectoryKind::PanRight, 8, s).map_err(e2s)?)
        .map_err(e2s)?;
    let same = cammc(&left, &left).map_err(e2s)?.value;
    let opposed = cammc(&left, &right).map_err(e2s)?.value;
    ensure(same == 0.0 && (opposed - 2.0 * s).abs() < 1e-9, || {
        format!("self {same:e}, opposed {opposed} (want {})", 2.0 * s)
    })?;
    Ok(format!("pan-left vs pan-right = {opposed}"))
}

fn vae_determinism() -> Result<String, String> {
    let mut rng = SeededRng::new(32);
    let clips: Vec<MotionClip> = (0..2)
        .map(|_| MotionClip::from_padded(Tensor::randn(&[4, 8, 8, 3], 0.5, &mut rng)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    let cfg = TrainConfig {
        steps: 20,
        seed: 33,
        ..TrainConfig::default()
    };
    let (_, a) = pose_vae::train(&clips, &cfg).map_err(e2s)?;
    let (_, b) = pose_vae::train(&clips, &cfg).map_err(e2s)?;
    let same = a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.total.to_bits() == y.total.to_bits());
    ensure(same, || "loss histories differ".into())?;
    Ok(format!("{} steps bit-identical", a.len()))
}
