//! Trajectory consistency and motion-field reconstruction metrics.
//!
//! CamMC here is defined as the mean, over adjacent frame pairs, of the L2
//! distance between the two sequences' relative poses flattened to
//! row-major `[R|t]` 12-vectors. This definition is versioned as
//! [`CAMMC_DEFINITION`] and written into every report.

use serde::Serialize;
use thiserror::Error;

use crate::plucker::{MotionVector, SparseMotionField};
use crate::pose_io::PoseSequence;

pub const CAMMC_DEFINITION: &str =
    "cammc-v1: mean over adjacent pairs of L2(flatten([R|t]) of relative poses)";
pub const FIELD_MSE_DEFINITION: &str =
    "field-mse-v1: mean of squared differences over dx, dy and 6 Plucker deltas";

/// Components per motion vector entering [`field_mse`].
pub const FIELD_COMPONENTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sequence lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("sequences need at least 2 frames, got {0}")]
    SequenceTooShort(usize),
    #[error("motion fields differ: {0}")]
    GridMismatch(String),
}

/// JSON keys serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Frames in the compared sequences (cammc) or motion frames (field_mse).
    pub n: usize,
    pub per_frame: Vec<f64>,
    pub definition: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excluded: Option<usize>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn cammc(a: &PoseSequence, b: &PoseSequence) -> Result<MetricReport, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(MetricError::SequenceTooShort(a.len()));
    }
    let per_frame: Vec<f64> = a
        .relative_poses()
        .iter()
        .zip(b.relative_poses().iter())
        .map(|(ra, rb)| {
            let (va, vb) = (ra.to_motion_matrix(), rb.to_motion_matrix());
            va.iter()
                .zip(&vb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(MetricReport {
        metric: "cammc".into(),
        value: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        n: a.len(),
        per_frame,
        definition: CAMMC_DEFINITION.into(),
        excluded: None,
    })
}

fn components(v: &MotionVector) -> [f64; FIELD_COMPONENTS] {
    let mut out = [0.0; FIELD_COMPONENTS];
    out[0] = v.dx;
    out[1] = v.dy;
    out[2..].copy_from_slice(&v.plucker_delta);
    out
}

/// Mean squared error over all components of vectors valid in both fields.
/// Pairs with either side invalid are skipped and counted in `excluded`.
/// Frames with no valid pair report 0.
pub fn field_mse(
    a: &SparseMotionField,
    b: &SparseMotionField,
) -> Result<MetricReport, MetricError> {
    if a.grid != b.grid {
        return Err(MetricError::GridMismatch(format!(
            "{}x{} stride {}x{} vs {}x{} stride {}x{}",
            a.grid.cols(),
            a.grid.rows(),
            a.grid.stride_x,
            a.grid.stride_y,
            b.grid.cols(),
            b.grid.rows(),
            b.grid.stride_x,
            b.grid.stride_y
        )));
    }
    if a.n_motion_frames != b.n_motion_frames {
        return Err(MetricError::GridMismatch(format!(
            "{} vs {} motion frames",
            a.n_motion_frames, b.n_motion_frames
        )));
    }
    let mut excluded = 0;
    let (mut total, mut count) = (0.0, 0usize);
    let mut per_frame = Vec::with_capacity(a.n_motion_frames);
    for k in 0..a.n_motion_frames {
        let (mut sum, mut n) = (0.0, 0usize);
        for (va, vb) in a.frame(k).iter().zip(b.frame(k)) {
            if !(va.valid && vb.valid) {
                excluded += 1;
                continue;
            }
            let (ca, cb) = (components(va), components(vb));
            sum += ca
                .iter()
                .zip(&cb)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
            n += FIELD_COMPONENTS;
        }
        per_frame.push(if n == 0 { 0.0 } else { sum / n as f64 });
        total += sum;
        count += n;
    }
    Ok(MetricReport {
        metric: "field_mse".into(),
        value: if count == 0 {
            0.0
        } else {
            total / count as f64
        },
        n: a.n_motion_frames,
        per_frame,
        definition: FIELD_MSE_DEFINITION.into(),
        excluded: Some(excluded),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plucker::sparse_grid;
    use crate::trajectory::{generate, TrajectoryKind, TrajectorySpec};

    fn traj(kind: TrajectoryKind, n: usize, speed: f64) -> PoseSequence {
        generate(&TrajectorySpec::new(kind, n, speed).unwrap()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let a = traj(TrajectoryKind::Roundabout, 12, 0.3);
        let r = cammc(&a, &a).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.per_frame.len(), 11);
    }

    #[test]
    fn zoom_against_static_is_speed() {
        let zoom = traj(TrajectoryKind::ZoomIn, 2, 0.1);
        let still = PoseSequence::new(
            "static",
            zoom.frames
                .iter()
                .map(|f| crate::pose_io::PoseFrame {
                    pose: crate::pose_io::CameraPose::identity(),
                    ..*f
                })
                .collect(),
        )
        .unwrap();
        assert!((cammc(&zoom, &still).unwrap().value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn opposite_pans_are_twice_speed() {
        let left = traj(TrajectoryKind::PanLeft, 9, 0.25);
        let right = traj(TrajectoryKind::PanRight, 9, 0.25);
        let r = cammc(&left, &right).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        assert_eq!(cammc(&right, &left).unwrap().value, r.value);
    }

    #[test]
    fn length_errors() {
        let a = traj(TrajectoryKind::PanUp, 4, 0.1);
        let b = traj(TrajectoryKind::PanUp, 5, 0.1);
        assert_eq!(
            cammc(&a, &b).unwrap_err(),
            MetricError::LengthMismatch { a: 4, b: 5 }
        );
        let one = PoseSequence::new("one", a.frames[..1].to_vec()).unwrap();
        assert_eq!(
            cammc(&one, &one).unwrap_err(),
            MetricError::SequenceTooShort(1)
        );
    }

    #[test]
    fn json_key_order() {
        let a = traj(TrajectoryKind::PanUp, 3, 0.1);
        let json = serde_json::to_string(&cammc(&a, &a).unwrap()).unwrap();
        assert!(json.starts_with(
            r#"{"metric":"cammc","value":0.0,"n":3,"per_frame":[0.0,0.0],"definition":"#
        ));
        assert!(!json.contains("excluded"));
    }

    #[test]
    fn field_mse_shifted_dx() {
        let grid = sparse_grid(80, 40, 20, 20).unwrap();
        let a = SparseMotionField::zeros(2, grid);
        let mut b = a.clone();
        b.vectors.iter_mut().for_each(|v| v.dx += 1.0);
        let r = field_mse(&a, &b).unwrap();
        assert!((r.value - 1.0 / FIELD_COMPONENTS as f64).abs() < 1e-15);
        assert_eq!(r.excluded, Some(0));
        assert_eq!(field_mse(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn field_mse_excludes_invalid() {
        let grid = sparse_grid(40, 40, 20, 20).unwrap();
        let a = SparseMotionField::zeros(1, grid);
        let mut b = a.clone();
        b.vectors[0].valid = false;
        b.vectors[0].dx = 100.0;
        let r = field_mse(&a, &b).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.excluded, Some(1));
    }

    #[test]
    fn field_mse_grid_mismatch() {
        let a = SparseMotionField::zeros(1, sparse_grid(40, 40, 20, 20).unwrap());
        let b = SparseMotionField::zeros(1, sparse_grid(40, 40, 10, 20).unwrap());
        assert!(matches!(
            field_mse(&a, &b),
            Err(MetricError::GridMismatch(_))
        ));
        let c = SparseMotionField::zeros(2, sparse_grid(40, 40, 20, 20).unwrap());
        assert!(matches!(
            field_mse(&a, &c),
            Err(MetricError::GridMismatch(_))
        ));
    }
}
