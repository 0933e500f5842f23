//! Synthetic surveillance-like scenes with known anomaly masks.
//!
//! The background has two textured halves: horizontal stripes on top and
//! vertical stripes below. Normal objects are flat discs drifting sideways.
//! Anomalies are discs filled with a fine checkerboard, a texture never
//! present in normal footage.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{self, Frame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sd: f64,
    pub blob_radius: f64,
    pub blob_value: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            noise_sd: 0.02,
            blob_radius: 5.0,
            blob_value: 0.45,
            seed: 0,
        }
    }
}

/// A checkerboard disc visible on frames `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    pub start: usize,
    pub len: usize,
    pub radius: f64,
    /// Centre `(y, x)` on the first frame.
    pub origin: (f64, f64),
    /// Displacement per frame.
    pub velocity: (f64, f64),
}

/// Constant brightness offset applied from frame `start` on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub start: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: Vec<Frame>,
    /// `T × H × W`, 1 on anomaly pixels.
    pub masks: Array3<u8>,
}

fn background(cfg: &SceneConfig, y: usize, x: usize) -> f64 {
    let tau = std::f64::consts::TAU;
    if y < cfg.height / 2 {
        0.25 + 0.12 * (tau * y as f64 / 8.0).sin()
    } else {
        0.45 + 0.12 * (tau * x as f64 / 8.0).sin()
    }
}

/// Centres of the two normal blobs at frame `t`: one per background half,
/// moving in opposite directions and wrapping around.
fn blob_centres(cfg: &SceneConfig, t: usize) -> [(f64, f64); 2] {
    let span = cfg.width as f64 + 2.0 * cfg.blob_radius;
    let wrap = |x: f64| x.rem_euclid(span) - cfg.blob_radius;
    let (h, t) = (cfg.height as f64, t as f64);
    [(h * 0.25, wrap(5.0 + 1.5 * t)), (h * 0.75, wrap(40.0 - 1.0 * t))]
}

fn inside(y: usize, x: usize, centre: (f64, f64), r: f64) -> bool {
    let (dy, dx) = (y as f64 + 0.5 - centre.0, x as f64 + 0.5 - centre.1);
    dy * dy + dx * dx <= r * r
}

/// Render frames `0..n_frames` of the scene.
pub fn render(cfg: &SceneConfig, n_frames: usize, anomalies: &[AnomalySpec], drift: Option<Drift>) -> Video {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).expect("valid sd");
    let mut masks = Array3::<u8>::zeros((n_frames, h, w));
    let frames = (0..n_frames)
        .map(|t| {
            let blobs = blob_centres(cfg, t);
            let active: Vec<(f64, f64, f64)> = anomalies
                .iter()
                .filter(|a| t >= a.start && t < a.start + a.len)
                .map(|a| {
                    let dt = (t - a.start) as f64;
                    (a.origin.0 + a.velocity.0 * dt, a.origin.1 + a.velocity.1 * dt, a.radius)
                })
                .collect();
            let offset = drift.filter(|d| t >= d.start).map_or(0.0, |d| d.offset);
            let pixels = Array2::from_shape_fn((h, w), |(y, x)| {
                let mut v = background(cfg, y, x);
                if blobs.iter().any(|&c| inside(y, x, c, cfg.blob_radius)) {
                    v = cfg.blob_value;
                }
                if active.iter().any(|&(cy, cx, r)| inside(y, x, (cy, cx), r)) {
                    v = if (y / 2 + x / 2) % 2 == 0 { 0.05 } else { 0.95 };
                    masks[[t, y, x]] = 1;
                }
                v + offset
            });
            let pixels = pixels.mapv(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            Frame::new(pixels, t)
        })
        .collect();
    Video { frames, masks }
}

/// Write frames as `frames/frame_NNNN.pgm` and masks as
/// `masks/mask_NNNN.pgm` under `dir`.
pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    let (fdir, mdir) = (dir.join("frames"), dir.join("masks"));
    for d in [&fdir, &mdir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (t, f) in video.frames.iter().enumerate() {
        ingest::save_frame(&fdir.join(format!("frame_{t:04}.pgm")), f)?;
        let mask = video.masks.index_axis(ndarray::Axis(0), t);
        let (h, w) = mask.dim();
        let bytes: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
        ingest::write_pgm8(&mdir.join(format!("mask_{t:04}.pgm")), w, h, &bytes)?;
    }
    Ok(())
}
