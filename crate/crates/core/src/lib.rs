//! Camera-pose conditioning toolkit.
//!
//! The pipeline runs from camera trajectories to a compact pose latent that
//! can be injected into the temporal attention layers of a video diffusion
//! transformer:
//!
//! ```text
//! RealEstate10K text ──► PoseSequence ──► SparseMotionField ──► RGB clip
//!                                                                  │
//!            temporal features ◄── tai_inject ◄── PoseLatent ◄── VAE
//! ```
//!
//! All numerics run in `f64`. Trainable pieces ([`pose_vae`], [`tai`]) carry
//! hand-written backward passes that are verified against central finite
//! differences ([`tensor::finite_diff_check`]).

pub mod metrics;
pub mod motion_render;
pub mod plucker;
pub mod pose_io;
pub mod pose_vae;
pub mod rng;
pub mod selftest;
pub mod tai;
pub mod tensor;
pub mod trajectory;

pub use metrics::{cammc, field_mse, MetricReport};
pub use motion_render::{RenderConfig, RgbImage};
pub use plucker::{MotionVector, PluckerRay, SampleGrid, SparseMotionField};
pub use pose_io::{CameraIntrinsics, CameraPose, PoseFrame, PoseSequence};
pub use pose_vae::{MotionClip, VaeParams};
pub use tai::{InjectionStrategy, NoiseSchedule, TaiParams};
pub use tensor::{Parameter, Tensor};
pub use trajectory::{TrajectoryKind, TrajectorySpec};
