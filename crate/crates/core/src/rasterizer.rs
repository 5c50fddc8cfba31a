//! Forward pass: renders a Gaussian cloud onto slice planes.
//!
//! Pixel intensity is a plain weighted sum over Gaussians,
//! `I_p = sum_g o_g * exp(e_gp) * I_g` with the Mahalanobis exponent
//! `e_gp = -1/2 d^T Sigma^-1 d`, `d = c_p - mu_g`. There is no alpha
//! compositing or depth ordering; slices are cross-sections, not
//! projections.
//!
//! Per-Gaussian inverse covariances are precomputed once per render call and
//! the quadratic form is unrolled over the six symmetric coefficients.
//! Gaussians are walked in blocks of `tile_size` so a block of parameters
//! stays cache-resident while a whole row of pixels consumes it; the
//! per-pixel accumulation order (ascending Gaussian index) is the same for
//! every tile size and thread count, so exact-mode output is bitwise
//! reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianCloud, PixelGridSpec, SlicePose, SymMat3};

/// Rendering knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    /// Mahalanobis-squared culling threshold; `None` means exact mode
    /// (every Gaussian contributes to every pixel).
    pub cutoff_chi2: Option<f64>,
    /// Gaussians per cache-friendly work tile.
    pub tile_size: usize,
    /// Merge parallel gradient partials in a fixed order (bitwise
    /// deterministic). Disabling trades determinism (~1e-6) for speed.
    pub ordered_reduction: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            cutoff_chi2: None,
            tile_size: 64,
            ordered_reduction: true,
        }
    }
}

impl RenderOptions {
    /// Exact mode: no culling, fixed summation order.
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn with_cutoff(chi2: f64) -> Self {
        Self {
            cutoff_chi2: Some(chi2),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.cutoff_chi2 {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cutoff_chi2 must be positive, got {c}"
                )));
            }
        }
        if self.tile_size < 1 {
            return Err(Error::InvalidArgument("tile_size must be >= 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn cutoff(&self) -> f64 {
        self.cutoff_chi2.unwrap_or(f64::INFINITY)
    }
}

/// Per-Gaussian quantities reused across all pixels of a render or backward
/// call: inverse covariance, opacity, and (for finite cutoffs) the world
/// axis-aligned reach of the culling ellipsoid.
pub(crate) struct PreparedCloud {
    pub n: usize,
    pub means: Vec<[f64; 3]>,
    pub inv_cov: Vec<SymMat3>,
    pub opacity: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Half-extent of the chi^2 <= cutoff ellipsoid per world axis,
    /// `sqrt(cutoff * Sigma_kk)`; empty in exact mode.
    pub reach: Vec<[f64; 3]>,
}

impl PreparedCloud {
    pub fn new(cloud: &GaussianCloud, opts: &RenderOptions) -> Result<Self> {
        let n = cloud.len();
        let mut means = Vec::with_capacity(n);
        let mut inv_cov = Vec::with_capacity(n);
        let mut opacity = Vec::with_capacity(n);
        let mut intensity = Vec::with_capacity(n);
        let finite_cutoff = opts.cutoff_chi2.is_some();
        let mut reach = Vec::with_capacity(if finite_cutoff { n } else { 0 });
        for g in 0..n {
            let (cov, inv) = crate::model::covariance_from_params(&cloud.log_scale(g), &cloud.quat(g))?;
            means.push(cloud.mean(g));
            inv_cov.push(inv);
            opacity.push(cloud.opacity(g));
            intensity.push(cloud.intensity(g));
            if finite_cutoff {
                let c = opts.cutoff();
                reach.push([
                    (c * cov.0[0]).sqrt(),
                    (c * cov.0[3]).sqrt(),
                    (c * cov.0[5]).sqrt(),
                ]);
            }
        }
        Ok(Self {
            n,
            means,
            inv_cov,
            opacity,
            intensity,
            reach,
        })
    }

    /// Adds the contributions of Gaussians `[g0, g1)` at world point `c`
    /// into `acc`, term by term in ascending index order. Because every term
    /// lands in the same accumulator, the per-pixel summation order (and so
    /// the result, bitwise) does not depend on how the range is tiled.
    #[inline]
    pub fn accumulate(&self, c: [f64; 3], g0: usize, g1: usize, cutoff: f64, acc: &mut f64) {
        if cutoff.is_finite() {
            for g in g0..g1 {
                let mu = self.means[g];
                let d = [c[0] - mu[0], c[1] - mu[1], c[2] - mu[2]];
                let r = self.reach[g];
                if d[0].abs() > r[0] || d[1].abs() > r[1] || d[2].abs() > r[2] {
                    continue;
                }
                let q2 = self.inv_cov[g].quad_form(d);
                if q2 > cutoff {
                    continue;
                }
                *acc += self.opacity[g] * self.intensity[g] * (-0.5 * q2).exp();
            }
        } else {
            for g in g0..g1 {
                let mu = self.means[g];
                let d = [c[0] - mu[0], c[1] - mu[1], c[2] - mu[2]];
                let q2 = self.inv_cov[g].quad_form(d);
                *acc += self.opacity[g] * self.intensity[g] * (-0.5 * q2).exp();
            }
        }
    }

    /// Contribution sum of Gaussians `[g0, g1)` at a world point.
    #[inline]
    pub fn splat_range(&self, c: [f64; 3], g0: usize, g1: usize, cutoff: f64) -> f64 {
        let mut acc = 0.0;
        self.accumulate(c, g0, g1, cutoff, &mut acc);
        acc
    }
}

/// Intensity contributed by the whole cloud at a single world point.
pub fn splat_pixel(cloud: &GaussianCloud, c_p: [f64; 3], opts: &RenderOptions) -> Result<f64> {
    opts.validate()?;
    if !c_p.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("query point is not finite".into()));
    }
    let prep = PreparedCloud::new(cloud, opts)?;
    Ok(prep.splat_range(c_p, 0, prep.n, opts.cutoff()))
}

/// World-space positions of a slice row: `origin + j * step`.
#[inline]
pub(crate) fn row_basis(pose: &SlicePose, grid: &PixelGridSpec, i: usize) -> ([f64; 3], [f64; 3], f64) {
    let r = &pose.rotation;
    let t = &pose.translation;
    let rt = r * t;
    let y = grid.y_at(i);
    let x0 = grid.x_at(0);
    // c(i, j) = x_j * R[:,0] + y_i * R[:,1] + R t, with x_j = x0 + j * dx.
    let dx = if grid.width == 1 {
        0.0
    } else {
        (grid.extent[1] - grid.extent[0]) / (grid.width - 1) as f64
    };
    let origin = [
        x0 * r[(0, 0)] + y * r[(0, 1)] + rt[0],
        x0 * r[(1, 0)] + y * r[(1, 1)] + rt[1],
        x0 * r[(2, 0)] + y * r[(2, 1)] + rt[2],
    ];
    let step = [r[(0, 0)], r[(1, 0)], r[(2, 0)]];
    (origin, step, dx)
}

/// Column range `[j0, j1]` of a row whose pixels can lie inside a
/// Gaussian's reach box. `delta` is the per-column world step (`dx * step`).
/// Returns `None` when the row misses the box entirely.
#[inline]
pub(crate) fn column_range(
    origin: [f64; 3],
    delta: [f64; 3],
    mu: [f64; 3],
    reach: [f64; 3],
    width: usize,
) -> Option<(usize, usize)> {
    let mut lo = 0.0f64;
    let mut hi = (width - 1) as f64;
    for k in 0..3 {
        let a = delta[k];
        let b = origin[k] - mu[k];
        if a == 0.0 {
            if b.abs() > reach[k] {
                return None;
            }
        } else {
            let t0 = (-reach[k] - b) / a;
            let t1 = (reach[k] - b) / a;
            let (mn, mx) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            lo = lo.max(mn);
            hi = hi.min(mx);
            if lo > hi {
                return None;
            }
        }
    }
    let j0 = lo.ceil() as usize;
    let j1 = hi.floor().min((width - 1) as f64) as usize;
    if j0 > j1 {
        None
    } else {
        Some((j0, j1))
    }
}

pub(crate) fn render_slice_prepared(
    prep: &PreparedCloud,
    pose: &SlicePose,
    grid: &PixelGridSpec,
    opts: &RenderOptions,
) -> Vec<f64> {
    let width = grid.width;
    let cutoff = opts.cutoff();
    let tile = opts.tile_size.max(1);
    let mut image = vec![0.0f64; grid.pixels()];
    image
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| {
            let (origin, step, dx) = row_basis(pose, grid, i);
            if cutoff.is_finite() {
                // Per Gaussian, restrict the column loop to the pixels its
                // culling box can reach; per-pixel accumulation order stays
                // ascending in Gaussian index.
                let delta = [dx * step[0], dx * step[1], dx * step[2]];
                for g in 0..prep.n {
                    let mu = prep.means[g];
                    let Some((j0, j1)) = column_range(origin, delta, mu, prep.reach[g], width)
                    else {
                        continue;
                    };
                    let o_i = prep.opacity[g] * prep.intensity[g];
                    let inv = &prep.inv_cov[g];
                    for (j, px) in row.iter_mut().enumerate().take(j1 + 1).skip(j0) {
                        let x = j as f64 * dx;
                        let d = [
                            origin[0] + x * step[0] - mu[0],
                            origin[1] + x * step[1] - mu[1],
                            origin[2] + x * step[2] - mu[2],
                        ];
                        let q2 = inv.quad_form(d);
                        if q2 > cutoff {
                            continue;
                        }
                        *px += o_i * (-0.5 * q2).exp();
                    }
                }
            } else {
                let mut g0 = 0;
                while g0 < prep.n {
                    let g1 = (g0 + tile).min(prep.n);
                    for (j, px) in row.iter_mut().enumerate() {
                        let x = j as f64 * dx;
                        let c = [
                            origin[0] + x * step[0],
                            origin[1] + x * step[1],
                            origin[2] + x * step[2],
                        ];
                        prep.accumulate(c, g0, g1, cutoff, px);
                    }
                    g0 = g1;
                }
            }
        });
    image
}

/// Renders one slice; `image[i * width + j]` is the intensity at pixel
/// `(i, j)`.
pub fn render_slice(
    cloud: &GaussianCloud,
    pose: &SlicePose,
    grid: &PixelGridSpec,
    opts: &RenderOptions,
) -> Result<Vec<f64>> {
    opts.validate()?;
    grid.validate()?;
    let prep = PreparedCloud::new(cloud, opts)?;
    Ok(render_slice_prepared(&prep, pose, grid, opts))
}

/// Renders every pose in order.
pub fn render_sweep(
    cloud: &GaussianCloud,
    poses: &[SlicePose],
    grid: &PixelGridSpec,
    opts: &RenderOptions,
) -> Result<Vec<Vec<f64>>> {
    opts.validate()?;
    grid.validate()?;
    let prep = PreparedCloud::new(cloud, opts)?;
    Ok(poses
        .iter()
        .map(|pose| render_slice_prepared(&prep, pose, grid, opts))
        .collect())
}
