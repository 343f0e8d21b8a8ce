//! Camera trajectories in the RealEstate10K text format.
//!
//! A trajectory file starts with an opaque header line (the source video URL
//! in the dataset) followed by one line per frame:
//!
//! ```text
//! timestamp_us fx fy cx cy k1 k2 r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3
//! ```
//!
//! Intrinsics are normalized by image width/height. The 3×4 block is the
//! world-to-camera extrinsic `[R|t]`, so a world point `X` maps to camera
//! coordinates as `R·X + t`. This convention is used everywhere in the crate.
//! The distortion terms `k1 k2` are parsed and dropped (pinhole model), and
//! are written back as zeros.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Orthonormality tolerance for poses read from text.
pub const PARSE_ROTATION_TOLERANCE: f64 = 1e-4;
/// Orthonormality tolerance for poses built in code.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

const FIELD_COUNT: usize = 19;
const DECIMALS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("expected {FIELD_COUNT} fields, found {found}")]
    FieldCount { found: usize },
    #[error("field {index} is not a valid number: {token:?}")]
    Numeric { index: usize, token: String },
    #[error("rotation is not orthonormal (max |R·Rᵀ - I| = {orthogonality:.3e}, det = {det})")]
    NonOrthonormalRotation { orthogonality: f64, det: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("sequence contains no pose lines")]
    EmptySequence,
    #[error("timestamps must increase strictly ({previous} then {current})")]
    NonMonotonicTimestamps { previous: u64, current: u64 },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<PoseError>,
    },
}

impl PoseError {
    fn at_line(self, line: usize) -> Self {
        PoseError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

/// Pinhole intrinsics normalized by image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, PoseError> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(PoseError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !((0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy)) {
            return Err(PoseError::InvalidIntrinsics(format!(
                "principal point must lie in [0, 1] (cx={cx}, cy={cy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Square-pixel intrinsics for a 640×360 frame with a centered principal
    /// point and a 0.5 normalized horizontal focal length.
    pub fn default_640x360() -> Self {
        Self {
            fx: 0.5,
            fy: 0.5 * 640.0 / 360.0,
            cx: 0.5,
            cy: 0.5,
        }
    }

    /// `K` in pixel units for a `width × height` image.
    pub fn pixel_matrix(&self, width: f64, height: f64) -> Matrix3<f64> {
        Matrix3::new(
            self.fx * width,
            0.0,
            self.cx * width,
            0.0,
            self.fy * height,
            self.cy * height,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Rigid world-to-camera transform `x_cam = R·x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        Self::with_tolerance(rotation, translation, ROTATION_TOLERANCE)
    }

    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self, PoseError> {
        let orthogonality = orthogonality_error(&rotation);
        let det = rotation.determinant();
        if !(orthogonality < tolerance && (det - 1.0).abs() < tolerance)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(PoseError::NonOrthonormalRotation { orthogonality, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Pure translation with identity rotation.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Builds a pose whose rotation is known to be orthonormal up to rounding
    /// (products and transposes of valid rotations).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Optical center in world coordinates, `-Rᵀ·t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Maps a world point into this camera's frame.
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Row-major flatten of `[R|t]`.
    pub fn to_motion_matrix(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = self.rotation[(row, col)];
            }
            out[row * 4 + 3] = self.translation[row];
        }
        out
    }

    pub fn from_motion_matrix(values: &[f64; 12]) -> Result<Self, PoseError> {
        Self::from_motion_matrix_with_tolerance(values, ROTATION_TOLERANCE)
    }

    fn from_motion_matrix_with_tolerance(
        values: &[f64; 12],
        tolerance: f64,
    ) -> Result<Self, PoseError> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::with_tolerance(rotation, translation, tolerance)
    }
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// `max |R·Rᵀ − I|` over all entries.
pub fn orthogonality_error(rotation: &Matrix3<f64>) -> f64 {
    (rotation * rotation.transpose() - Matrix3::identity()).amax()
}

/// Transform from camera `a` coordinates to camera `b` coordinates.
///
/// `R_rel = R_b·R_aᵀ`, `t_rel = t_b − R_rel·t_a`, so that
/// `compose(&relative_pose(a, b), a) == b`.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> CameraPose {
    let rotation = b.rotation * a.rotation.transpose();
    let translation = b.translation - rotation * a.translation;
    CameraPose::from_parts_unchecked(rotation, translation)
}

/// Applies `first`, then `second`.
pub fn compose(second: &CameraPose, first: &CameraPose) -> CameraPose {
    CameraPose::from_parts_unchecked(
        second.rotation * first.rotation,
        second.rotation * first.translation + second.translation,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseFrame {
    pub timestamp_us: u64,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    /// First line of the file. Carried through unchanged.
    pub header: String,
    pub frames: Vec<PoseFrame>,
}

impl PoseSequence {
    /// Validates ordering. An empty frame list is rejected.
    pub fn new(header: impl Into<String>, frames: Vec<PoseFrame>) -> Result<Self, PoseError> {
        if frames.is_empty() {
            return Err(PoseError::EmptySequence);
        }
        for pair in frames.windows(2) {
            if pair[1].timestamp_us <= pair[0].timestamp_us {
                return Err(PoseError::NonMonotonicTimestamps {
                    previous: pair[0].timestamp_us,
                    current: pair[1].timestamp_us,
                });
            }
        }
        Ok(Self {
            header: header.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &CameraPose> {
        self.frames.iter().map(|f| &f.pose)
    }

    /// Relative poses between adjacent frames.
    pub fn relative_poses(&self) -> Vec<CameraPose> {
        self.frames
            .windows(2)
            .map(|w| relative_pose(&w[0].pose, &w[1].pose))
            .collect()
    }
}

impl FromStr for PoseSequence {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_sequence(s)
    }
}

/// Parses one pose line.
pub fn parse_line(line: &str) -> Result<PoseFrame, PoseError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != FIELD_COUNT {
        return Err(PoseError::FieldCount {
            found: tokens.len(),
        });
    }
    let timestamp_us = tokens[0].parse::<u64>().map_err(|_| PoseError::Numeric {
        index: 0,
        token: tokens[0].to_string(),
    })?;
    let mut values = [0.0f64; FIELD_COUNT - 1];
    for (i, token) in tokens[1..].iter().enumerate() {
        let v = token
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| PoseError::Numeric {
                index: i + 1,
                token: token.to_string(),
            })?;
        values[i] = v;
    }
    let intrinsics = CameraIntrinsics::new(values[0], values[1], values[2], values[3])?;
    // values[4], values[5] are k1, k2.
    let matrix: [f64; 12] = values[6..18].try_into().expect("12 extrinsic values");
    let pose = CameraPose::from_motion_matrix_with_tolerance(&matrix, PARSE_ROTATION_TOLERANCE)?;
    Ok(PoseFrame {
        timestamp_us,
        intrinsics,
        pose,
    })
}

/// Parses a whole trajectory file. Blank lines after the header are skipped.
/// Errors carry the 1-based line number.
pub fn parse_sequence(text: &str) -> Result<PoseSequence, PoseError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(PoseError::EmptySequence)?;
    let mut frames: Vec<PoseFrame> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let frame = parse_line(line).map_err(|e| e.at_line(line_no))?;
        if let Some(prev) = frames.last() {
            if frame.timestamp_us <= prev.timestamp_us {
                return Err(PoseError::NonMonotonicTimestamps {
                    previous: prev.timestamp_us,
                    current: frame.timestamp_us,
                }
                .at_line(line_no));
            }
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(PoseError::EmptySequence);
    }
    Ok(PoseSequence {
        header: header.trim_end_matches('\r').to_string(),
        frames,
    })
}

/// Formats one frame as a pose line (no trailing newline).
pub fn serialize_frame(frame: &PoseFrame) -> String {
    let k = &frame.intrinsics;
    let mut out = String::with_capacity(220);
    write!(out, "{}", frame.timestamp_us).unwrap();
    for v in [k.fx, k.fy, k.cx, k.cy, 0.0, 0.0]
        .into_iter()
        .chain(frame.pose.to_motion_matrix())
    {
        write!(out, " {v:.DECIMALS$}").unwrap();
    }
    out
}

/// Writes the header and one line per frame, `\n` terminated. Values carry
/// nine decimal places, the precision of the published dataset files.
pub fn serialize_sequence(seq: &PoseSequence) -> String {
    let mut out = String::with_capacity(seq.header.len() + 1 + seq.frames.len() * 220);
    out.push_str(&seq.header);
    out.push('\n');
    for frame in &seq.frames {
        out.push_str(&serialize_frame(frame));
        out.push('\n');
    }
    out
}
