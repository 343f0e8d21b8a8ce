//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{Matrix3, Rotation3, Vector3};
use posefield::pose_io::{CameraIntrinsics, CameraPose, PoseFrame, PoseSequence};
use posefield::rng::SeededRng;
use posefield::{RgbImage, Tensor};

/// Minimal binary PPM reader: `P6`, whitespace-separated width, height and
/// maxval 255, one whitespace byte, then raw RGB.
pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a P6 file".into());
    }
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    if token()? != "255" {
        return Err("maxval must be 255".into());
    }
    let body = &bytes[pos + 1..];
    if body.len() != width * height * 3 {
        return Err(format!(
            "expected {} pixel bytes, got {}",
            width * height * 3,
            body.len()
        ));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

pub fn random_rotation(rng: &mut SeededRng) -> Matrix3<f64> {
    let axis_angle = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    *Rotation3::new(axis_angle).matrix()
}

pub fn random_pose(rng: &mut SeededRng, extent: f64) -> CameraPose {
    let t = Vector3::new(
        rng.uniform_range(-extent, extent),
        rng.uniform_range(-extent, extent),
        rng.uniform_range(-extent, extent),
    );
    CameraPose::new(random_rotation(rng), t).expect("axis-angle rotation is orthonormal")
}

pub fn random_intrinsics(rng: &mut SeededRng) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.uniform_range(0.2, 3.0),
        rng.uniform_range(0.2, 3.0),
        rng.uniform_range(0.0, 1.0),
        rng.uniform_range(0.0, 1.0),
    )
    .expect("positive focal lengths")
}

pub fn random_sequence(rng: &mut SeededRng, len: usize) -> PoseSequence {
    let mut t = 0u64;
    let frames = (0..len)
        .map(|_| {
            t += 1 + (rng.next_u64() % 100_000);
            PoseFrame {
                timestamp_us: t,
                intrinsics: random_intrinsics(rng),
                pose: random_pose(rng, 10.0),
            }
        })
        .collect();
    PoseSequence::new(
        format!("https://example.com/video/{}", rng.next_u64()),
        frames,
    )
    .unwrap()
}

/// Every pose replaced by the identity, keeping timestamps and intrinsics.
pub fn static_like(seq: &PoseSequence) -> PoseSequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| PoseFrame {
            pose: CameraPose::identity(),
            ..*f
        })
        .collect();
    PoseSequence::new("static", frames).unwrap()
}

/// Central-difference gradient of `f` at `x`, written independently of the
/// library checker.
pub fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst `|n − a| / max(|n|, |a|, 1e−8)` over all coordinates.
pub fn max_rel_err(numeric: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(numeric.len(), analytic.len());
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs() / n.abs().max(a.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Checks every input of a multi-input scalar function against its analytic
/// gradients.
pub fn check_inputs(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    grads: &[Tensor],
    h: f64,
) -> f64 {
    assert_eq!(inputs.len(), grads.len());
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let g = |x: &Tensor| {
            let mut all = inputs.to_vec();
            all[i] = x.clone();
            f(&all)
        };
        worst = worst.max(max_rel_err(
            &numeric_grad(&g, &inputs[i], h),
            grads[i].data(),
        ));
    }
    worst
}

/// `n` values with magnitude in `[lo, hi)` and random sign.
pub fn signed_uniform(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform_range(lo, hi);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}
