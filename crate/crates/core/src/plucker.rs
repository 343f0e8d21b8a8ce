//! Pixel rays, Plücker line coordinates and strided sparse motion fields.
//!
//! A pixel `(x, y)` of a `W × H` frame back-projects through the pixel-unit
//! intrinsics to `K⁻¹·[x, y, 1]ᵀ`. For a world-to-camera pose `[R|t]` the
//! optical center in world coordinates is `o = −Rᵀ·t` and the world ray
//! direction is `d = normalize(Rᵀ·K⁻¹·[x, y, 1]ᵀ)`. The Plücker coordinates of
//! the ray are `(d, o × d)`; the moment does not depend on which point of the
//! line is used, and `d · (o × d) = 0` by construction.
//!
//! Motion fields are sampled on a grid with `M = ⌊W/s_x⌋` columns and
//! `N = ⌊H/s_y⌋` rows, starting at pixel `(0, 0)`. Each adjacent frame pair
//! gets one [`MotionVector`] per grid point carrying:
//!
//! * the componentwise difference of the two Plücker rays, and
//! * a 2D pixel flow: the point at unit depth along frame `k`'s ray is moved
//!   into frame `k+1` with the relative pose and re-projected. No scene depth
//!   is available, so unit depth is a modelling assumption.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::pose_io::{relative_pose, CameraIntrinsics, CameraPose, PoseSequence};

/// Focal lengths (in pixels) below this are treated as degenerate.
const MIN_FOCAL_PX: f64 = 1e-12;
/// Reprojected depths at or below this are behind the camera.
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PluckerError {
    #[error("degenerate intrinsics: focal length is zero in pixel units")]
    DegenerateIntrinsics,
    #[error("image size must be positive, got {width}x{height}")]
    EmptyImage { width: f64, height: f64 },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("stride {stride} exceeds image extent {extent}")]
    StrideExceedsImage { stride: u32, extent: u32 },
    #[error("motion needs at least 2 poses, got {0}")]
    SequenceTooShort(usize),
    #[error("reprojected point lies behind the camera (depth {0})")]
    PointBehindCamera(f64),
    #[error("homogeneous pixel must have positive last coordinate")]
    NonPositiveHomogeneous,
}

/// `K⁻¹·[x, y, 1]ᵀ` with `K` denormalized to a `width × height` image.
///
/// Pixel coordinates are real-valued and are not clipped to the image.
pub fn backproject_pixel(
    k: &CameraIntrinsics,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
) -> Result<Vector3<f64>, PluckerError> {
    backproject_homogeneous(k, &Vector3::new(x, y, 1.0), width, height)
}

fn backproject_homogeneous(
    k: &CameraIntrinsics,
    h: &Vector3<f64>,
    width: f64,
    height: f64,
) -> Result<Vector3<f64>, PluckerError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(PluckerError::EmptyImage { width, height });
    }
    let (fx, fy) = (k.fx * width, k.fy * height);
    if fx.abs() < MIN_FOCAL_PX || fy.abs() < MIN_FOCAL_PX {
        return Err(PluckerError::DegenerateIntrinsics);
    }
    let (cx, cy) = (k.cx * width, k.cy * height);
    Ok(Vector3::new(
        (h.x - cx * h.z) / fx,
        (h.y - cy * h.z) / fy,
        h.z,
    ))
}

/// `Q = R·K⁻¹·[x, y, 1]ᵀ + t`.
pub fn camera_point(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
) -> Result<Vector3<f64>, PluckerError> {
    let ray = backproject_pixel(k, x, y, width, height)?;
    Ok(pose.rotation() * ray + pose.translation())
}

/// Plücker line `(direction, moment)`, `moment = point × direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl PluckerRay {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.direction.x,
            self.direction.y,
            self.direction.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        ]
    }
}

pub fn plucker_ray(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
) -> Result<PluckerRay, PluckerError> {
    plucker_ray_homogeneous(pose, k, &Vector3::new(x, y, 1.0), width, height)
}

/// Same as [`plucker_ray`] for a homogeneous pixel `λ·[x, y, 1]`, `λ > 0`.
pub fn plucker_ray_homogeneous(
    pose: &CameraPose,
    k: &CameraIntrinsics,
    pixel: &Vector3<f64>,
    width: f64,
    height: f64,
) -> Result<PluckerRay, PluckerError> {
    if !(pixel.z > 0.0) {
        return Err(PluckerError::NonPositiveHomogeneous);
    }
    let cam_ray = backproject_homogeneous(k, pixel, width, height)?;
    let direction = (pose.rotation().transpose() * cam_ray).normalize();
    let moment = pose.center().cross(&direction);
    Ok(PluckerRay { direction, moment })
}

/// Strided sample positions, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGrid {
    pub width_px: u32,
    pub height_px: u32,
    pub stride_x: u32,
    pub stride_y: u32,
    pub points: Vec<(u32, u32)>,
}

impl SampleGrid {
    /// Number of columns, `M`.
    pub fn cols(&self) -> usize {
        (self.width_px / self.stride_x) as usize
    }

    /// Number of rows, `N`.
    pub fn rows(&self) -> usize {
        (self.height_px / self.stride_y) as usize
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn sparse_grid(
    width: u32,
    height: u32,
    stride_x: u32,
    stride_y: u32,
) -> Result<SampleGrid, PluckerError> {
    if stride_x == 0 || stride_y == 0 {
        return Err(PluckerError::ZeroStride);
    }
    if stride_x > width {
        return Err(PluckerError::StrideExceedsImage {
            stride: stride_x,
            extent: width,
        });
    }
    if stride_y > height {
        return Err(PluckerError::StrideExceedsImage {
            stride: stride_y,
            extent: height,
        });
    }
    let (cols, rows) = (width / stride_x, height / stride_y);
    let points = (0..rows)
        .flat_map(|j| (0..cols).map(move |i| (i * stride_x, j * stride_y)))
        .collect();
    Ok(SampleGrid {
        width_px: width,
        height_px: height,
        stride_x,
        stride_y,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector {
    pub dx: f64,
    pub dy: f64,
    pub plucker_delta: [f64; 6],
    /// False when the flow point fell behind the next camera; `dx`/`dy` are
    /// then zero and must not be read as motion.
    pub valid: bool,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector {
        dx: 0.0,
        dy: 0.0,
        plucker_delta: [0.0; 6],
        valid: true,
    };

    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Which per-point quantity a consumer reads from a motion field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionChannels {
    /// 2 channels: `(dx, dy)`.
    Flow,
    /// 6 channels: Plücker delta.
    Plucker,
}

impl MotionChannels {
    pub fn count(self) -> usize {
        match self {
            MotionChannels::Flow => 2,
            MotionChannels::Plucker => 6,
        }
    }
}

/// `[n_motion_frames][rows][cols]` motion vectors, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMotionField {
    pub n_motion_frames: usize,
    pub grid: SampleGrid,
    pub vectors: Vec<MotionVector>,
}

impl SparseMotionField {
    /// A field of zero vectors.
    pub fn zeros(n_motion_frames: usize, grid: SampleGrid) -> Self {
        let vectors = vec![MotionVector::ZERO; n_motion_frames * grid.len()];
        Self {
            n_motion_frames,
            grid,
            vectors,
        }
    }

    pub fn frame(&self, k: usize) -> &[MotionVector] {
        let n = self.grid.len();
        &self.vectors[k * n..(k + 1) * n]
    }

    pub fn get(&self, frame: usize, row: usize, col: usize) -> &MotionVector {
        &self.vectors[(frame * self.grid.rows() + row) * self.grid.cols() + col]
    }

    pub fn get_mut(&mut self, frame: usize, row: usize, col: usize) -> &mut MotionVector {
        let idx = (frame * self.grid.rows() + row) * self.grid.cols() + col;
        &mut self.vectors[idx]
    }

    pub fn invalid_count(&self) -> usize {
        self.vectors.iter().filter(|v| !v.valid).count()
    }

    /// Channel values of one vector for the given selector.
    pub fn channels(v: &MotionVector, channels: MotionChannels) -> Vec<f64> {
        match channels {
            MotionChannels::Flow => vec![v.dx, v.dy],
            MotionChannels::Plucker => v.plucker_delta.to_vec(),
        }
    }
}

/// Pixel displacement of the unit-depth point on the ray through `(x, y)`
/// when moving from camera `a` (intrinsics `ka`) to camera `b`.
#[allow(clippy::too_many_arguments)]
pub fn unit_depth_flow(
    a: &CameraPose,
    ka: &CameraIntrinsics,
    b: &CameraPose,
    kb: &CameraIntrinsics,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
) -> Result<(f64, f64), PluckerError> {
    let rel = relative_pose(a, b);
    flow_with_relative(&rel, ka, kb, x, y, width, height)
}

fn flow_with_relative(
    rel: &CameraPose,
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
    x: f64,
    y: f64,
    width: f64,
    height: f64,
) -> Result<(f64, f64), PluckerError> {
    let point_a = backproject_pixel(ka, x, y, width, height)?;
    let point_b = rel.transform_point(&point_a);
    if point_b.z <= MIN_DEPTH {
        return Err(PluckerError::PointBehindCamera(point_b.z));
    }
    let u = kb.fx * width * point_b.x / point_b.z + kb.cx * width;
    let v = kb.fy * height * point_b.y / point_b.z + kb.cy * height;
    Ok((u - x, v - y))
}

fn frame_pair_vectors(
    seq: &PoseSequence,
    k: usize,
    grid: &SampleGrid,
) -> Result<Vec<MotionVector>, PluckerError> {
    let (fa, fb) = (&seq.frames[k], &seq.frames[k + 1]);
    let (w, h) = (grid.width_px as f64, grid.height_px as f64);
    let rel = relative_pose(&fa.pose, &fb.pose);
    grid.points
        .iter()
        .map(|&(px, py)| {
            let (x, y) = (px as f64, py as f64);
            let ra = plucker_ray(&fa.pose, &fa.intrinsics, x, y, w, h)?;
            let rb = plucker_ray(&fb.pose, &fb.intrinsics, x, y, w, h)?;
            let (a, b) = (ra.to_array(), rb.to_array());
            let plucker_delta = std::array::from_fn(|i| b[i] - a[i]);
            let (dx, dy, valid) =
                match flow_with_relative(&rel, &fa.intrinsics, &fb.intrinsics, x, y, w, h) {
                    Ok((dx, dy)) => (dx, dy, true),
                    Err(PluckerError::PointBehindCamera(_)) => (0.0, 0.0, false),
                    Err(e) => return Err(e),
                };
            Ok(MotionVector {
                dx,
                dy,
                plucker_delta,
                valid,
            })
        })
        .collect()
}

/// Motion between every adjacent pose pair on `grid`.
///
/// Frame pairs are evaluated in parallel; the result does not depend on the
/// number of worker threads. Points that re-project behind the next camera
/// are flagged with `valid = false`.
pub fn motion_field(
    seq: &PoseSequence,
    grid: &SampleGrid,
) -> Result<SparseMotionField, PluckerError> {
    if seq.len() < 2 {
        return Err(PluckerError::SequenceTooShort(seq.len()));
    }
    let n_motion_frames = seq.len() - 1;
    let per_frame: Vec<Vec<MotionVector>> = (0..n_motion_frames)
        .into_par_iter()
        .map(|k| frame_pair_vectors(seq, k, grid))
        .collect::<Result<_, _>>()?;
    Ok(SparseMotionField {
        n_motion_frames,
        grid: grid.clone(),
        vectors: per_frame.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::{PoseFrame, PoseSequence};
    use crate::trajectory::{generate, TrajectoryKind, TrajectorySpec};
    use nalgebra::{Matrix3, Rotation3};

    fn unit_k() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.5, 0.5).unwrap()
    }

    #[test]
    fn principal_point_backprojects_to_axis() {
        let k = CameraIntrinsics::default_640x360();
        let r = backproject_pixel(&k, 320.0, 180.0, 640.0, 360.0).unwrap();
        assert_eq!(r, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn backproject_closed_form() {
        let r = backproject_pixel(&unit_k(), 1.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(r, Vector3::new(0.5, 0.0, 1.0));
    }

    #[test]
    fn backproject_inverts_k() {
        let k = CameraIntrinsics::new(0.61, 0.93, 0.47, 0.52).unwrap();
        let (w, h) = (640.0, 360.0);
        for &(x, y) in &[(0.0, 0.0), (13.25, 300.5), (639.0, 359.0), (100.0, 17.0)] {
            let r = backproject_pixel(&k, x, y, w, h).unwrap();
            let back = k.pixel_matrix(w, h) * r;
            assert!((back - Vector3::new(x, y, 1.0)).amax() < 1e-10);
        }
    }

    #[test]
    fn degenerate_intrinsics_rejected() {
        // Bypass the constructor check to model a corrupt value.
        let k = CameraIntrinsics {
            fx: 0.0,
            fy: 1.0,
            cx: 0.5,
            cy: 0.5,
        };
        assert_eq!(
            backproject_pixel(&k, 1.0, 1.0, 10.0, 10.0),
            Err(PluckerError::DegenerateIntrinsics)
        );
    }

    #[test]
    fn camera_point_examples() {
        let k = CameraIntrinsics::default_640x360();
        let id = CameraPose::identity();
        assert_eq!(
            camera_point(&id, &k, 320.0, 180.0, 640.0, 360.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        let shifted = CameraPose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(
            camera_point(&shifted, &k, 320.0, 180.0, 640.0, 360.0).unwrap(),
            Vector3::new(0.0, 0.0, 3.0)
        );
        let rot: Matrix3<f64> =
            *Rotation3::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2).matrix();
        let rotated = CameraPose::new(rot, Vector3::zeros()).unwrap();
        let q = camera_point(&rotated, &k, 320.0, 180.0, 640.0, 360.0).unwrap();
        assert!((q - Vector3::new(1.0, 0.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn plucker_examples() {
        let k = CameraIntrinsics::default_640x360();
        let ray = plucker_ray(&CameraPose::identity(), &k, 320.0, 180.0, 640.0, 360.0).unwrap();
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.moment, Vector3::zeros());

        let pose = CameraPose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let ray = plucker_ray(&pose, &k, 320.0, 180.0, 640.0, 360.0).unwrap();
        assert_eq!(pose.center(), Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.moment, Vector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn homogeneous_scale_invariance() {
        let rot: Matrix3<f64> = *Rotation3::from_euler_angles(0.1, -0.4, 0.7).matrix();
        let pose = CameraPose::new(rot, Vector3::new(0.3, -1.2, 2.5)).unwrap();
        let k = CameraIntrinsics::new(0.55, 0.9, 0.45, 0.55).unwrap();
        let base = plucker_ray(&pose, &k, 111.0, 222.0, 640.0, 360.0).unwrap();
        for lambda in [0.25, 1.0, 3.0, 1e3] {
            let scaled = Vector3::new(111.0 * lambda, 222.0 * lambda, lambda);
            let r = plucker_ray_homogeneous(&pose, &k, &scaled, 640.0, 360.0).unwrap();
            assert!((r.direction - base.direction).amax() < 1e-12);
            assert!((r.moment - base.moment).amax() < 1e-12);
        }
        assert_eq!(
            plucker_ray_homogeneous(&pose, &k, &Vector3::new(1.0, 1.0, -1.0), 640.0, 360.0),
            Err(PluckerError::NonPositiveHomogeneous)
        );
    }

    #[test]
    fn grid_examples() {
        let g = sparse_grid(640, 360, 40, 40).unwrap();
        assert_eq!((g.cols(), g.rows(), g.len()), (16, 9, 144));
        assert_eq!(g.points[0], (0, 0));
        assert_eq!(g.points[1], (40, 0));
        assert_eq!(g.points[16], (0, 40));
        let g = sparse_grid(640, 360, 80, 80).unwrap();
        assert_eq!((g.cols(), g.rows(), g.len()), (8, 4, 32));
        let g = sparse_grid(50, 50, 50, 50).unwrap();
        assert_eq!(g.points, vec![(0, 0)]);
        assert_eq!(sparse_grid(10, 10, 0, 1), Err(PluckerError::ZeroStride));
        assert!(matches!(
            sparse_grid(10, 10, 11, 1),
            Err(PluckerError::StrideExceedsImage {
                stride: 11,
                extent: 10
            })
        ));
    }

    fn two_frame(pose_b: CameraPose) -> PoseSequence {
        let k = CameraIntrinsics::default_640x360();
        PoseSequence::new(
            "test",
            vec![
                PoseFrame {
                    timestamp_us: 0,
                    intrinsics: k,
                    pose: CameraPose::identity(),
                },
                PoseFrame {
                    timestamp_us: 1,
                    intrinsics: k,
                    pose: pose_b,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn static_sequence_has_zero_field() {
        let seq = two_frame(CameraPose::identity());
        let grid = sparse_grid(640, 360, 40, 40).unwrap();
        let field = motion_field(&seq, &grid).unwrap();
        assert_eq!(field.n_motion_frames, 1);
        assert!(field.vectors.iter().all(|v| *v == MotionVector::ZERO));
    }

    // Closed-form pinhole flow: a unit-depth point at normalized offset
    // (u, v) seen after the camera advances by s lands at (u, v)/(1 − s).
    #[test]
    fn zoom_in_flow_is_radial() {
        let s = 0.1;
        let seq = two_frame(CameraPose::from_translation(Vector3::new(0.0, 0.0, -s)));
        let grid = sparse_grid(640, 360, 40, 40).unwrap();
        let field = motion_field(&seq, &grid).unwrap();
        let (cx, cy) = (320.0, 180.0);
        for (v, &(px, py)) in field.frame(0).iter().zip(&grid.points) {
            let (ox, oy) = (px as f64 - cx, py as f64 - cy);
            let expect = (ox / (1.0 - s) - ox, oy / (1.0 - s) - oy);
            assert!((v.dx - expect.0).abs() < 1e-9 && (v.dy - expect.1).abs() < 1e-9);
            assert!(v.dx * ox + v.dy * oy >= 0.0);
        }
        let center = unit_depth_flow(
            &CameraPose::identity(),
            &CameraIntrinsics::default_640x360(),
            &seq.frames[1].pose,
            &CameraIntrinsics::default_640x360(),
            cx,
            cy,
            640.0,
            360.0,
        )
        .unwrap();
        assert_eq!(center, (0.0, 0.0));
    }

    #[test]
    fn seventeen_poses_give_sixteen_motion_frames() {
        let seq = generate(&TrajectorySpec::new(TrajectoryKind::ZoomIn, 17, 0.1).unwrap()).unwrap();
        let field = motion_field(&seq, &sparse_grid(640, 360, 40, 40).unwrap()).unwrap();
        assert_eq!(field.n_motion_frames, 16);
        assert_eq!(field.vectors.len(), 16 * 144);
        assert_eq!(field.invalid_count(), 0);
    }

    #[test]
    fn points_behind_camera_are_flagged() {
        // Moving forward past the unit-depth plane.
        let seq = two_frame(CameraPose::from_translation(Vector3::new(0.0, 0.0, -1.5)));
        let field = motion_field(&seq, &sparse_grid(640, 360, 40, 40).unwrap()).unwrap();
        assert_eq!(field.invalid_count(), 144);
        assert!(field.vectors.iter().all(|v| v.dx == 0.0 && v.dy == 0.0));
    }

    #[test]
    fn short_sequence_rejected() {
        let seq = PoseSequence::new(
            "one",
            vec![PoseFrame {
                timestamp_us: 0,
                intrinsics: CameraIntrinsics::default_640x360(),
                pose: CameraPose::identity(),
            }],
        )
        .unwrap();
        assert_eq!(
            motion_field(&seq, &sparse_grid(640, 360, 40, 40).unwrap()),
            Err(PluckerError::SequenceTooShort(1))
        );
    }

    #[test]
    fn output_independent_of_thread_count() {
        let spec = TrajectorySpec::new(TrajectoryKind::Roundabout, 17, 0.3).unwrap();
        let seq = generate(&spec).unwrap();
        let grid = sparse_grid(640, 360, 20, 20).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| motion_field(&seq, &grid).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
