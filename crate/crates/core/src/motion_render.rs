//! RGB rasterization of sparse motion fields, arrow overlays and binary PPM
//! output.
//!
//! Color encoding (zero motion is the background color):
//!
//! ```text
//! background  (128, 128, 0)
//! R = clamp(128 + 127·dx/max_magnitude)
//! G = clamp(128 + 127·dy/max_magnitude)
//! B = clamp(255·‖(dx, dy)‖/max_magnitude)
//! invalid     (0, 0, 255)
//! ```
//!
//! Channels are rounded to the nearest integer and clamped to `[0, 255]`.
//! Each grid point is drawn as a filled disc whose radius is a quarter of the
//! smaller output-space stride (rounded up), centered on the grid point
//! scaled into the output image. Later points overwrite earlier ones in
//! row-major order.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::plucker::{MotionVector, SparseMotionField};

pub const BACKGROUND: [u8; 3] = [128, 128, 0];
pub const INVALID_COLOR: [u8; 3] = [0, 0, 255];
pub const ARROW_COLOR: [u8; 3] = [0, 0, 0];
/// Length in pixels of each arrow-head barb.
const ARROW_HEAD_PX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("frame {frame} out of range (field has {available} motion frames)")]
    FrameOutOfRange { frame: usize, available: usize },
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub out_width: usize,
    pub out_height: usize,
    /// Flow magnitude (px) mapped to full channel swing.
    pub max_magnitude: f64,
    pub draw_arrows: bool,
    pub arrow_scale: f64,
}

impl RenderConfig {
    pub fn new(out_width: usize, out_height: usize, max_magnitude: f64) -> Self {
        Self {
            out_width,
            out_height,
            max_magnitude,
            draw_arrows: false,
            arrow_scale: 1.0,
        }
    }

    fn validate(&self) -> Result<(), RenderError> {
        if self.out_width == 0 || self.out_height == 0 {
            return Err(RenderError::InvalidConfig(
                "output size must be positive".into(),
            ));
        }
        if !(self.max_magnitude.is_finite() && self.max_magnitude > 0.0) {
            return Err(RenderError::InvalidConfig(
                "max_magnitude must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn channel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Color for one motion vector.
pub fn encode_color(v: &MotionVector, max_magnitude: f64) -> [u8; 3] {
    if !v.valid {
        return INVALID_COLOR;
    }
    [
        channel(128.0 + 127.0 * v.dx / max_magnitude),
        channel(128.0 + 127.0 * v.dy / max_magnitude),
        channel(255.0 * v.magnitude() / max_magnitude),
    ]
}

/// Inverse of the R/G encoding, exact up to quantization for in-range flow.
pub fn decode_color(rgb: [u8; 3], max_magnitude: f64) -> (f64, f64) {
    (
        (rgb[0] as f64 - 128.0) * max_magnitude / 127.0,
        (rgb[1] as f64 - 128.0) * max_magnitude / 127.0,
    )
}

struct Layout {
    scale_x: f64,
    scale_y: f64,
    radius: i64,
}

impl Layout {
    fn new(field: &SparseMotionField, cfg: &RenderConfig) -> Self {
        let grid = &field.grid;
        let scale_x = cfg.out_width as f64 / grid.width_px as f64;
        let scale_y = cfg.out_height as f64 / grid.height_px as f64;
        let stride = (grid.stride_x as f64 * scale_x).min(grid.stride_y as f64 * scale_y);
        Self {
            scale_x,
            scale_y,
            radius: (stride / 4.0).ceil() as i64,
        }
    }

    fn position(&self, point: (u32, u32)) -> (f64, f64) {
        (point.0 as f64 * self.scale_x, point.1 as f64 * self.scale_y)
    }
}

fn check_frame(field: &SparseMotionField, frame: usize) -> Result<(), RenderError> {
    if frame >= field.n_motion_frames {
        return Err(RenderError::FrameOutOfRange {
            frame,
            available: field.n_motion_frames,
        });
    }
    Ok(())
}

/// Splat-renders one motion frame.
pub fn rasterize(
    field: &SparseMotionField,
    frame: usize,
    cfg: &RenderConfig,
) -> Result<RgbImage, RenderError> {
    cfg.validate()?;
    check_frame(field, frame)?;
    let layout = Layout::new(field, cfg);
    let mut img = RgbImage::filled(cfg.out_width, cfg.out_height, BACKGROUND);
    let r = layout.radius;
    for (v, &point) in field.frame(frame).iter().zip(&field.grid.points) {
        let color = encode_color(v, cfg.max_magnitude);
        let (px, py) = layout.position(point);
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        for oy in -r..=r {
            for ox in -r..=r {
                if ox * ox + oy * oy <= r * r {
                    img.put(cx + ox, cy + oy, color);
                }
            }
        }
    }
    Ok(img)
}

/// Bresenham segment between two pixel centers, inclusive.
pub fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.put(x, y, color);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Returns a copy of `img` with one black arrow per valid grid vector,
/// running from the grid point along `(dx, dy)·arrow_scale` with two 2-px
/// head barbs at ±30° from the reversed shaft.
pub fn draw_arrows(
    img: &RgbImage,
    field: &SparseMotionField,
    frame: usize,
    cfg: &RenderConfig,
) -> Result<RgbImage, RenderError> {
    cfg.validate()?;
    check_frame(field, frame)?;
    let layout = Layout::new(field, cfg);
    let mut out = img.clone();
    for (v, &point) in field.frame(frame).iter().zip(&field.grid.points) {
        if !v.valid {
            continue;
        }
        let (px, py) = layout.position(point);
        let (ex, ey) = (
            v.dx * layout.scale_x * cfg.arrow_scale,
            v.dy * layout.scale_y * cfg.arrow_scale,
        );
        let start = (px.round() as i64, py.round() as i64);
        let tip = ((px + ex).round() as i64, (py + ey).round() as i64);
        if start == tip {
            continue;
        }
        draw_line(&mut out, start, tip, ARROW_COLOR);
        let back = (-ex).atan2(-ey);
        for barb in [back + 30f64.to_radians(), back - 30f64.to_radians()] {
            let end = (
                (tip.0 as f64 + ARROW_HEAD_PX * barb.sin()).round() as i64,
                (tip.1 as f64 + ARROW_HEAD_PX * barb.cos()).round() as i64,
            );
            draw_line(&mut out, tip, end, ARROW_COLOR);
        }
    }
    Ok(out)
}

/// One image per motion frame, with arrows when `cfg.draw_arrows` is set.
pub fn field_to_sequence(
    field: &SparseMotionField,
    cfg: &RenderConfig,
) -> Result<Vec<RgbImage>, RenderError> {
    (0..field.n_motion_frames)
        .into_par_iter()
        .map(|k| {
            let img = rasterize(field, k, cfg)?;
            if cfg.draw_arrows {
                draw_arrows(&img, field, k, cfg)
            } else {
                Ok(img)
            }
        })
        .collect()
}

/// Writes binary PPM (`P6`). Returns the number of bytes written.
pub fn write_ppm<W: Write>(img: &RgbImage, sink: &mut W) -> io::Result<usize> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    sink.write_all(header.as_bytes())?;
    let payload: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    sink.write_all(&payload)?;
    Ok(header.len() + payload.len())
}

/// `<prefix>_0000.ppm`, `<prefix>_0001.ppm`, ...
pub fn sequence_file_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:04}.ppm")
}

pub fn write_ppm_sequence(
    images: &[RgbImage],
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, RenderError> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(sequence_file_name(prefix, i));
            let mut w = BufWriter::new(File::create(&path)?);
            write_ppm(img, &mut w)?;
            w.flush()?;
            Ok(path)
        })
        .collect()
}
