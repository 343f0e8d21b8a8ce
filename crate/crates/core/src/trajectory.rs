//! Synthetic camera trajectories for the common camera-movement classes.
//!
//! Camera axes follow the usual computer-vision layout: `+x` right, `+y`
//! down, `+z` along the optical axis. Every trajectory starts at the world
//! origin looking down `+z`, except `Roundabout`, which orbits the origin.
//!
//! | kind        | per-frame motion of the camera center                  |
//! |-------------|--------------------------------------------------------|
//! | pan-left    | `−x` by `speed`                                        |
//! | pan-right   | `+x` by `speed`                                        |
//! | pan-up      | `−y` by `speed`                                        |
//! | pan-down    | `+y` by `speed`                                        |
//! | zoom-in     | `+z` (forward along the optical axis) by `speed`       |
//! | zoom-out    | `−z` by `speed`                                        |
//! | roundabout  | arc of length `speed` on a circle about the `y` axis   |
//! | shake       | static pose plus uniform jitter in `[−speed, speed)`   |
//!
//! Pans are translations with a fixed identity rotation. Stored extrinsics
//! are world-to-camera, so a camera center `c` becomes `t = −R·c`.
//!
//! Timestamps are spaced for 30 fps: frame `k` sits at `⌊k·10⁶/30⌋` µs.
//!
//! Shake jitter is drawn from [`crate::rng::SeededRng`] seeded with
//! `spec.seed`: for each frame, three translation offsets then three
//! rotation-vector components (radians), all uniform in `[−speed, speed)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::pose_io::{CameraIntrinsics, CameraPose, PoseFrame, PoseSequence};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    PanLeft,
    PanRight,
    PanUp,
    PanDown,
    ZoomIn,
    ZoomOut,
    Roundabout,
    Shake,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 8] = [
        TrajectoryKind::PanLeft,
        TrajectoryKind::PanRight,
        TrajectoryKind::PanUp,
        TrajectoryKind::PanDown,
        TrajectoryKind::ZoomIn,
        TrajectoryKind::ZoomOut,
        TrajectoryKind::Roundabout,
        TrajectoryKind::Shake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::PanLeft => "pan-left",
            TrajectoryKind::PanRight => "pan-right",
            TrajectoryKind::PanUp => "pan-up",
            TrajectoryKind::PanDown => "pan-down",
            TrajectoryKind::ZoomIn => "zoom-in",
            TrajectoryKind::ZoomOut => "zoom-out",
            TrajectoryKind::Roundabout => "roundabout",
            TrajectoryKind::Shake => "shake",
        }
    }

    /// Unit direction of camera-center motion for the linear kinds.
    fn direction(self) -> Option<Vector3<f64>> {
        Some(match self {
            TrajectoryKind::PanLeft => Vector3::new(-1.0, 0.0, 0.0),
            TrajectoryKind::PanRight => Vector3::new(1.0, 0.0, 0.0),
            TrajectoryKind::PanUp => Vector3::new(0.0, -1.0, 0.0),
            TrajectoryKind::PanDown => Vector3::new(0.0, 1.0, 0.0),
            TrajectoryKind::ZoomIn => Vector3::new(0.0, 0.0, 1.0),
            TrajectoryKind::ZoomOut => Vector3::new(0.0, 0.0, -1.0),
            TrajectoryKind::Roundabout | TrajectoryKind::Shake => return None,
        })
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("unknown trajectory kind {0:?}")]
    UnknownKind(String),
    #[error("a trajectory needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("speed must be positive and finite, got {0}")]
    InvalidSpeed(f64),
}

impl FromStr for TrajectoryKind {
    type Err = TrajectoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrajectoryKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TrajectoryError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub n_frames: usize,
    pub speed: f64,
    /// Only read by `Shake`.
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, n_frames: usize, speed: f64) -> Result<Self, TrajectoryError> {
        let spec = Self {
            kind,
            n_frames,
            speed,
            seed: 0,
            intrinsics: CameraIntrinsics::default_640x360(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_intrinsics(mut self, intrinsics: CameraIntrinsics) -> Self {
        self.intrinsics = intrinsics;
        self
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.n_frames < 2 {
            return Err(TrajectoryError::TooFewFrames(self.n_frames));
        }
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(TrajectoryError::InvalidSpeed(self.speed));
        }
        Ok(())
    }

    /// Radius of the roundabout circle, chosen so that one frame step is an
    /// arc of length `speed` and `n_frames` steps close the loop.
    pub fn roundabout_radius(&self) -> f64 {
        self.speed * self.n_frames as f64 / (2.0 * std::f64::consts::PI)
    }
}

pub const FRAME_INTERVAL_US: f64 = 1_000_000.0 / 30.0;

pub fn timestamp_us(frame: usize) -> u64 {
    (frame as f64 * FRAME_INTERVAL_US).floor() as u64
}

/// Pose at frame index `k` for the deterministic kinds. `k` may exceed
/// `n_frames − 1`, which is how roundabout closure is checked. `Shake` needs
/// its random stream, so it is only available through [`generate`].
pub fn pose_at(spec: &TrajectorySpec, k: usize) -> Option<CameraPose> {
    if let Some(dir) = spec.kind.direction() {
        let center = dir * (spec.speed * k as f64);
        return Some(CameraPose::from_translation(-center));
    }
    match spec.kind {
        TrajectoryKind::Roundabout => {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / spec.n_frames as f64;
            let radius = spec.roundabout_radius();
            let center = Vector3::new(radius * theta.sin(), 0.0, -radius * theta.cos());
            // Camera-to-world has columns x=(cos,0,sin), y=(0,1,0),
            // z=(−sin,0,cos): the optical axis points at the origin.
            let world_to_cam: Matrix3<f64> =
                *Rotation3::from_axis_angle(&Vector3::y_axis(), theta).matrix();
            let t = -(world_to_cam * center);
            Some(CameraPose::from_parts_unchecked(world_to_cam, t))
        }
        _ => None,
    }
}

pub fn generate(spec: &TrajectorySpec) -> Result<PoseSequence, TrajectoryError> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let frames = (0..spec.n_frames)
        .map(|k| {
            let pose = match spec.kind {
                TrajectoryKind::Shake => shake_pose(&mut rng, spec.speed),
                _ => pose_at(spec, k).expect("deterministic kind"),
            };
            PoseFrame {
                timestamp_us: timestamp_us(k),
                intrinsics: spec.intrinsics,
                pose,
            }
        })
        .collect();
    Ok(PoseSequence::new(describe(spec), frames).expect("30 fps timestamps increase"))
}

fn shake_pose(rng: &mut SeededRng, amplitude: f64) -> CameraPose {
    let mut draw = || rng.uniform_range(-amplitude, amplitude);
    let offset = Vector3::new(draw(), draw(), draw());
    let axis_angle = Vector3::new(draw(), draw(), draw());
    let rotation = *Rotation3::new(axis_angle).matrix();
    CameraPose::from_parts_unchecked(rotation, -(rotation * offset))
}

/// One-line summary, e.g. `zoom-in 17 frames speed=0.1`.
pub fn describe(spec: &TrajectorySpec) -> String {
    let mut s = format!(
        "{} {} frames speed={}",
        spec.kind, spec.n_frames, spec.speed
    );
    if spec.kind == TrajectoryKind::Shake {
        s.push_str(&format!(" seed={}", spec.seed));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::{orthogonality_error, relative_pose};

    #[test]
    fn zoom_in_closed_form() {
        let seq = generate(&TrajectorySpec::new(TrajectoryKind::ZoomIn, 17, 0.1).unwrap()).unwrap();
        assert_eq!(seq.len(), 17);
        for (k, frame) in seq.frames.iter().enumerate() {
            assert_eq!(*frame.pose.rotation(), Matrix3::identity());
            let c = frame.pose.center();
            assert!((c - Vector3::new(0.0, 0.0, 0.1 * k as f64)).amax() < 1e-15);
            assert!((frame.pose.translation() + c).amax() < 1e-15);
        }
        assert_eq!(seq.frames[1].timestamp_us, 33_333);
        assert_eq!(seq.frames[2].timestamp_us, 66_666);
    }

    #[test]
    fn shake_is_deterministic_per_seed() {
        let spec = TrajectorySpec::new(TrajectoryKind::Shake, 12, 0.02)
            .unwrap()
            .with_seed(42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&spec.with_seed(43)).unwrap();
        assert_ne!(generate(&spec).unwrap(), other);
    }

    #[test]
    fn roundabout_constant_step_angle() {
        let spec = TrajectorySpec::new(TrajectoryKind::Roundabout, 16, 0.2).unwrap();
        let seq = generate(&spec).unwrap();
        for rel in seq.relative_poses() {
            let r = rel.rotation();
            let angle = ((r.trace() - 1.0) / 2.0)
                .clamp(-1.0, 1.0)
                .acos()
                .to_degrees();
            assert!((angle - 22.5).abs() < 1e-9, "angle {angle}");
            // Vertical axis: y stays fixed.
            assert!((r * Vector3::y() - Vector3::y()).amax() < 1e-12);
        }
    }

    #[test]
    fn roundabout_closes_and_faces_center() {
        let spec = TrajectorySpec::new(TrajectoryKind::Roundabout, 16, 0.2).unwrap();
        let first = pose_at(&spec, 0).unwrap();
        let wrapped = pose_at(&spec, 16).unwrap();
        assert!((first.rotation() - wrapped.rotation()).amax() < 1e-6);
        assert!((first.translation() - wrapped.translation()).amax() < 1e-6);
        for k in 0..16 {
            let pose = pose_at(&spec, k).unwrap();
            let origin_in_cam = pose.transform_point(&Vector3::zeros());
            assert!(origin_in_cam.x.abs() < 1e-12 && origin_in_cam.y.abs() < 1e-12);
            assert!((origin_in_cam.z - spec.roundabout_radius()).abs() < 1e-12);
        }
        // Consecutive centers are one arc-step apart (chord ≈ arc).
        let step = (pose_at(&spec, 1).unwrap().center() - first.center()).norm();
        assert!((step - 0.2).abs() < 0.2 * 0.01);
    }

    #[test]
    fn all_rotations_valid_and_pans_keep_identity() {
        for kind in TrajectoryKind::ALL {
            let spec = TrajectorySpec::new(kind, 9, 0.05).unwrap().with_seed(5);
            let seq = generate(&spec).unwrap();
            for f in &seq.frames {
                assert!(orthogonality_error(f.pose.rotation()) < 1e-6);
                assert!((f.pose.rotation().determinant() - 1.0).abs() < 1e-6);
                if kind.name().starts_with("pan") {
                    assert_eq!(*f.pose.rotation(), Matrix3::identity());
                }
            }
        }
    }

    #[test]
    fn pans_move_the_expected_way() {
        let step = |kind| {
            let seq = generate(&TrajectorySpec::new(kind, 2, 0.5).unwrap()).unwrap();
            seq.frames[1].pose.center() - seq.frames[0].pose.center()
        };
        assert_eq!(step(TrajectoryKind::PanLeft), Vector3::new(-0.5, 0.0, 0.0));
        assert_eq!(step(TrajectoryKind::PanRight), Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(step(TrajectoryKind::PanUp), Vector3::new(0.0, -0.5, 0.0));
        assert_eq!(step(TrajectoryKind::PanDown), Vector3::new(0.0, 0.5, 0.0));
        assert_eq!(step(TrajectoryKind::ZoomOut), Vector3::new(0.0, 0.0, -0.5));
        let rel = relative_pose(
            &pose_at(
                &TrajectorySpec::new(TrajectoryKind::PanLeft, 2, 0.5).unwrap(),
                0,
            )
            .unwrap(),
            &pose_at(
                &TrajectorySpec::new(TrajectoryKind::PanLeft, 2, 0.5).unwrap(),
                1,
            )
            .unwrap(),
        );
        assert_eq!(*rel.translation(), Vector3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn describe_strings() {
        let zoom = TrajectorySpec::new(TrajectoryKind::ZoomIn, 17, 0.1).unwrap();
        assert_eq!(describe(&zoom), "zoom-in 17 frames speed=0.1");
        let pan = TrajectorySpec::new(TrajectoryKind::PanLeft, 16, 0.05).unwrap();
        assert_eq!(describe(&pan), "pan-left 16 frames speed=0.05");
        let shake = TrajectorySpec::new(TrajectoryKind::Shake, 8, 0.01)
            .unwrap()
            .with_seed(42);
        assert!(describe(&shake).contains("seed=42"));
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert_eq!(
            TrajectorySpec::new(TrajectoryKind::ZoomIn, 1, 0.1),
            Err(TrajectoryError::TooFewFrames(1))
        );
        assert!(TrajectorySpec::new(TrajectoryKind::ZoomIn, 4, 0.0).is_err());
        assert_eq!(
            "roundabout".parse::<TrajectoryKind>(),
            Ok(TrajectoryKind::Roundabout)
        );
        assert!("sideways".parse::<TrajectoryKind>().is_err());
    }
}
