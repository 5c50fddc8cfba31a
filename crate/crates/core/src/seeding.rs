//! Initialization of Gaussian parameters.
//!
//! Means are either laid out on regular sub-grids within the known slice
//! planes (on-slice) or sampled uniformly from a bounding box. All other
//! parameters start from fixed defaults chosen so every Gaussian is visible
//! from the first step: opacity logit 1.0 (opacity ~ 0.73), intensity 0.5,
//! log-scale 0.5 per axis (scale ~ 1.65), identity rotation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianCloud, PixelGridSpec, SlicePose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    OnSlice,
    UniformBox,
}

/// Initialization parameters and per-Gaussian defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub strategy: InitStrategy,
    /// Gaussians per slice for on-slice initialization.
    pub per_slice_count: usize,
    /// `(min, max)` corners for uniform-box initialization.
    pub bounding_box: Option<([f64; 3], [f64; 3])>,
    pub opacity_logit: f64,
    pub intensity: f64,
    pub log_scale: [f64; 3],
    pub quat: [f64; 4],
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            strategy: InitStrategy::OnSlice,
            per_slice_count: 120,
            bounding_box: None,
            opacity_logit: 1.0,
            intensity: 0.5,
            log_scale: [0.5; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_slice_count < 1 {
            return Err(Error::InvalidArgument(
                "per_slice_count must be >= 1".into(),
            ));
        }
        if let Some((a, b)) = self.bounding_box {
            if !a.iter().zip(&b).all(|(lo, hi)| hi >= lo) {
                return Err(Error::InvalidArgument(format!(
                    "bounding box must be well-ordered, got {a:?}..{b:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Near-square sub-grid dimensions `(rows, cols)` for `count` points on a
/// grid with the given physical aspect ratio (width / height). The product
/// `rows * cols` never exceeds `count`; remainder points are dropped.
fn sub_grid_dims(count: usize, aspect: f64) -> (usize, usize) {
    let ideal_rows = ((count as f64) / aspect).sqrt();
    let mut best = (1usize, count);
    let mut best_score = f64::INFINITY;
    for rows in 1..=count {
        let cols = count / rows;
        if cols == 0 {
            break;
        }
        let placed = rows * cols;
        // Prefer placing as many points as possible, then closeness of the
        // realized aspect to the grid's.
        let aspect_err = ((cols as f64 / rows as f64).ln() - aspect.ln()).abs();
        let score = (count - placed) as f64 * 10.0 + aspect_err;
        if score < best_score {
            best_score = score;
            best = (rows, cols);
        }
        let _ = ideal_rows;
    }
    best
}

/// Coordinates of `n` uniformly spaced points across `[lo, hi]`, endpoints
/// inclusive; a single point sits at the midpoint.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|k| lo + k as f64 * (hi - lo) / (n - 1) as f64)
        .collect()
}

/// Places a near-square grid of `cfg.per_slice_count` points on every slice
/// plane, mapped to world coordinates by each slice's pose.
pub fn init_on_slice(
    poses: &[SlicePose],
    grid: &PixelGridSpec,
    cfg: &InitConfig,
) -> Result<GaussianCloud> {
    cfg.validate()?;
    grid.validate()?;
    if poses.is_empty() {
        return Err(Error::InvalidArgument(
            "on-slice init needs at least one pose".into(),
        ));
    }
    let [ax, bx, ay, by] = grid.extent;
    let aspect = (bx - ax) / (by - ay);
    let (rows, cols) = sub_grid_dims(cfg.per_slice_count, aspect);
    let xs = linspace(ax, bx, cols);
    let ys = linspace(ay, by, rows);

    let mut cloud = GaussianCloud::empty();
    for pose in poses {
        for &y in &ys {
            for &x in &xs {
                let c = pose.plane_point(x, y);
                cloud.push(
                    [c.x, c.y, c.z],
                    cfg.log_scale,
                    cfg.quat,
                    cfg.opacity_logit,
                    cfg.intensity,
                );
            }
        }
    }
    Ok(cloud)
}

/// Samples `n` means uniformly from the box `[a, b]`; everything else takes
/// the defaults. Deterministic for a given seed.
pub fn init_uniform(
    bbox: ([f64; 3], [f64; 3]),
    n: usize,
    cfg: &InitConfig,
    seed: u64,
) -> Result<GaussianCloud> {
    cfg.validate()?;
    let (a, b) = bbox;
    if !a.iter().zip(&b).all(|(lo, hi)| hi >= lo) {
        return Err(Error::InvalidArgument(format!(
            "bounding box must be well-ordered, got {a:?}..{b:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::empty();
    for _ in 0..n {
        let xi: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let mean = [
            a[0] + (b[0] - a[0]) * xi[0],
            a[1] + (b[1] - a[1]) * xi[1],
            a[2] + (b[2] - a[2]) * xi[2],
        ];
        cloud.push(
            mean,
            cfg.log_scale,
            cfg.quat,
            cfg.opacity_logit,
            cfg.intensity,
        );
    }
    Ok(cloud)
}
