//! Backward pass: hand-derived analytic gradients of the loss with respect
//! to every Gaussian parameter.
//!
//! Given upstream per-pixel gradients `w_p = dL/dI_p`, the chain is, per
//! Gaussian `g` and pixel `p` (`d = c_p - mu_g`, `E = exp(e_gp)`,
//! `e_gp = -1/2 d^T Sigma^-1 d`):
//!
//! - intensity:  `dL/dI_g += w_p * o_g * E`
//! - opacity:    `dL/do_g += w_p * I_g * E`, chained through the sigmoid to
//!   the stored logit (`dl = do * o * (1 - o)`)
//! - mean:       `dL/dmu_g += w_p * I_g * o_g * E * Sigma^-1 d`
//! - covariance: `dL/dSigma_g += 1/2 w_p I_g o_g E (Sigma^-1 d)(Sigma^-1 d)^T`,
//!   kept as six symmetric coefficients
//!
//! The covariance gradient is then propagated through the factorization
//! `Sigma = M^T M`, `M = S R`. Differentiating `Sigma = M^T M` directly
//! (rather than trusting any printed operand order) gives
//! `dL/dM = 2 M (dL/dSigma)` and, with `M_kl = s_k R_kl`,
//! `dL/ds_k = sum_l (dL/dM)_kl R_kl` and `dL/dR_kl = s_k (dL/dM)_kl`;
//! both are verified against the finite-difference oracle. Scales chain
//! through `exp`, rotations through the analytic Jacobian of `R(q)` and the
//! normalization projection `dL/dq_raw = (I - q q^T) dL/dq / |q_raw|`.
//!
//! Gradient accumulation runs parallel over fixed row blocks with partials
//! merged in block order, so results are bitwise reproducible for any
//! thread count; an unordered (faster, ~1e-6) merge can be selected via
//! [`RenderOptions::ordered_reduction`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{GaussianCloud, PixelGridSpec, SlicePose, SliceStack};
use crate::rasterizer::{render_sweep, row_basis, PreparedCloud, RenderOptions};

/// Rows per parallel accumulation block.
const ROW_BLOCK: usize = 8;

/// Per-Gaussian gradient accumulators mirroring the cloud's parameter
/// layout. All entries are loss-units per parameter-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_means: Vec<f64>,
    pub d_log_scales: Vec<f64>,
    pub d_quats: Vec<f64>,
    pub d_opacity_logits: Vec<f64>,
    pub d_intensities: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_means: vec![0.0; 3 * n],
            d_log_scales: vec![0.0; 3 * n],
            d_quats: vec![0.0; 4 * n],
            d_opacity_logits: vec![0.0; n],
            d_intensities: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Self) {
        let add = |a: &mut [f64], b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        };
        add(&mut self.d_means, &other.d_means);
        add(&mut self.d_log_scales, &other.d_log_scales);
        add(&mut self.d_quats, &other.d_quats);
        add(&mut self.d_opacity_logits, &other.d_opacity_logits);
        add(&mut self.d_intensities, &other.d_intensities);
    }

    pub fn scale(&mut self, s: f64) {
        for arr in [
            &mut self.d_means,
            &mut self.d_log_scales,
            &mut self.d_quats,
            &mut self.d_opacity_logits,
            &mut self.d_intensities,
        ] {
            for v in arr.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Named parameter groups in declared order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("means", &self.d_means),
            ("log_scales", &self.d_log_scales),
            ("quats", &self.d_quats),
            ("opacity_logits", &self.d_opacity_logits),
            ("intensities", &self.d_intensities),
        ]
    }
}

/// Max over all parameters of `|a - b| / (|b| + floor)`.
pub fn max_relative_error(a: &GradientSet, b: &GradientSet, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for ((_, ga), (_, gb)) in a.groups().iter().zip(b.groups().iter()) {
        for (x, y) in ga.iter().zip(gb.iter()) {
            worst = worst.max((x - y).abs() / (y.abs() + floor));
        }
    }
    worst
}

/// Raw per-pixel sums accumulated in phase one, before chaining through the
/// parameterizations.
struct Accum {
    d_intensity: Vec<f64>,
    d_opacity: Vec<f64>,
    d_mean: Vec<f64>,
    /// dL/dSigma in six-coefficient form (xx, xy, xz, yy, yz, zz); the two
    /// off-diagonal halves are equal by construction.
    d_cov: Vec<f64>,
}

impl Accum {
    fn zeros(n: usize) -> Self {
        Self {
            d_intensity: vec![0.0; n],
            d_opacity: vec![0.0; n],
            d_mean: vec![0.0; 3 * n],
            d_cov: vec![0.0; 6 * n],
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.d_intensity, &other.d_intensity),
            (&mut self.d_opacity, &other.d_opacity),
            (&mut self.d_mean, &other.d_mean),
            (&mut self.d_cov, &other.d_cov),
        ] {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }
}

/// Accumulates phase-one sums for a block of rows of one slice.
/// Phase-one contribution of one (pixel, Gaussian) pair.
#[inline]
fn accumulate_pair(prep: &PreparedCloud, g: usize, d: [f64; 3], q2: f64, w: f64, acc: &mut Accum) {
    let e = (-0.5 * q2).exp();
    let o = prep.opacity[g];
    let intensity = prep.intensity[g];
    acc.d_intensity[g] += w * o * e;
    acc.d_opacity[g] += w * intensity * e;
    let common = w * intensity * o * e;
    let v = prep.inv_cov[g].mat_vec(d);
    acc.d_mean[3 * g] += common * v[0];
    acc.d_mean[3 * g + 1] += common * v[1];
    acc.d_mean[3 * g + 2] += common * v[2];
    let half = 0.5 * common;
    let cv = &mut acc.d_cov[6 * g..6 * g + 6];
    cv[0] += half * v[0] * v[0];
    cv[1] += half * v[0] * v[1];
    cv[2] += half * v[0] * v[2];
    cv[3] += half * v[1] * v[1];
    cv[4] += half * v[1] * v[2];
    cv[5] += half * v[2] * v[2];
}

fn accumulate_rows(
    prep: &PreparedCloud,
    pose: &SlicePose,
    grid: &PixelGridSpec,
    upstream: &[f64],
    opts: &RenderOptions,
    rows: std::ops::Range<usize>,
    acc: &mut Accum,
) {
    let cutoff = opts.cutoff();
    let tile = opts.tile_size.max(1);
    for i in rows {
        let (origin, step, dx) = row_basis(pose, grid, i);
        let row_up = &upstream[i * grid.width..(i + 1) * grid.width];
        if cutoff.is_finite() {
            let delta = [dx * step[0], dx * step[1], dx * step[2]];
            for g in 0..prep.n {
                let mu = prep.means[g];
                let Some((j0, j1)) =
                    crate::rasterizer::column_range(origin, delta, mu, prep.reach[g], grid.width)
                else {
                    continue;
                };
                for (j, &w) in row_up.iter().enumerate().take(j1 + 1).skip(j0) {
                    if w == 0.0 {
                        continue;
                    }
                    let x = j as f64 * dx;
                    let d = [
                        origin[0] + x * step[0] - mu[0],
                        origin[1] + x * step[1] - mu[1],
                        origin[2] + x * step[2] - mu[2],
                    ];
                    let q2 = prep.inv_cov[g].quad_form(d);
                    if q2 > cutoff {
                        continue;
                    }
                    accumulate_pair(prep, g, d, q2, w, acc);
                }
            }
        } else {
            let mut g0 = 0;
            while g0 < prep.n {
                let g1 = (g0 + tile).min(prep.n);
                for (j, &w) in row_up.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let x = j as f64 * dx;
                    let c = [
                        origin[0] + x * step[0],
                        origin[1] + x * step[1],
                        origin[2] + x * step[2],
                    ];
                    for g in g0..g1 {
                        let mu = prep.means[g];
                        let d = [c[0] - mu[0], c[1] - mu[1], c[2] - mu[2]];
                        let q2 = prep.inv_cov[g].quad_form(d);
                        accumulate_pair(prep, g, d, q2, w, acc);
                    }
                }
                g0 = g1;
            }
        }
    }
}

fn accumulate_slice(
    prep: &PreparedCloud,
    pose: &SlicePose,
    grid: &PixelGridSpec,
    upstream: &[f64],
    opts: &RenderOptions,
    total: &mut Accum,
) {
    let n = prep.n;
    let blocks: Vec<std::ops::Range<usize>> = (0..grid.height)
        .step_by(ROW_BLOCK)
        .map(|r0| r0..(r0 + ROW_BLOCK).min(grid.height))
        .collect();
    if opts.ordered_reduction {
        let partials: Vec<Accum> = blocks
            .into_par_iter()
            .map(|rows| {
                let mut acc = Accum::zeros(n);
                accumulate_rows(prep, pose, grid, upstream, opts, rows, &mut acc);
                acc
            })
            .collect();
        for p in &partials {
            total.add_assign(p);
        }
    } else {
        let merged = blocks
            .into_par_iter()
            .map(|rows| {
                let mut acc = Accum::zeros(n);
                accumulate_rows(prep, pose, grid, upstream, opts, rows, &mut acc);
                acc
            })
            .reduce(
                || Accum::zeros(n),
                |mut a, b| {
                    a.add_assign(&b);
                    a
                },
            );
        total.add_assign(&merged);
    }
}

/// Analytic partials of `R(q)` contracted against an upstream `dL/dR`,
/// followed by the projection through quaternion normalization.
fn chain_rotation_to_quat(d_r: &[[f64; 3]; 3], q_unit: &[f64; 4], raw_norm: f64) -> [f64; 4] {
    let (w, x, y, z) = (q_unit[0], q_unit[1], q_unit[2], q_unit[3]);
    let g = d_r;
    let dw = g[0][1] * (-2.0 * z)
        + g[0][2] * (2.0 * y)
        + g[1][0] * (2.0 * z)
        + g[1][2] * (-2.0 * x)
        + g[2][0] * (-2.0 * y)
        + g[2][1] * (2.0 * x);
    let dx = g[0][1] * (2.0 * y)
        + g[0][2] * (2.0 * z)
        + g[1][0] * (2.0 * y)
        + g[1][1] * (-4.0 * x)
        + g[1][2] * (-2.0 * w)
        + g[2][0] * (2.0 * z)
        + g[2][1] * (2.0 * w)
        + g[2][2] * (-4.0 * x);
    let dy = g[0][0] * (-4.0 * y)
        + g[0][1] * (2.0 * x)
        + g[0][2] * (2.0 * w)
        + g[1][0] * (2.0 * x)
        + g[1][2] * (2.0 * z)
        + g[2][0] * (-2.0 * w)
        + g[2][1] * (2.0 * z)
        + g[2][2] * (-4.0 * y);
    let dz = g[0][0] * (-4.0 * z)
        + g[0][1] * (-2.0 * w)
        + g[0][2] * (2.0 * x)
        + g[1][0] * (2.0 * w)
        + g[1][1] * (-4.0 * z)
        + g[1][2] * (2.0 * y)
        + g[2][0] * (2.0 * x)
        + g[2][1] * (2.0 * y);
    let dq = [dw, dx, dy, dz];
    // dL/dq_raw = (I - q q^T) dL/dq / |q_raw|.
    let dot = q_unit[0] * dq[0] + q_unit[1] * dq[1] + q_unit[2] * dq[2] + q_unit[3] * dq[3];
    [
        (dq[0] - q_unit[0] * dot) / raw_norm,
        (dq[1] - q_unit[1] * dot) / raw_norm,
        (dq[2] - q_unit[2] * dot) / raw_norm,
        (dq[3] - q_unit[3] * dot) / raw_norm,
    ]
}

/// Phase two: per-Gaussian chain from raw sums to stored parameters.
fn chain_to_parameters(cloud: &GaussianCloud, acc: &Accum) -> Result<GradientSet> {
    let n = cloud.len();
    let mut out = GradientSet::zeros(n);
    out.d_intensities.copy_from_slice(&acc.d_intensity);

    for g in 0..n {
        // Opacity: chain through the sigmoid to the stored logit.
        let o = cloud.opacity(g);
        out.d_opacity_logits[g] = acc.d_opacity[g] * o * (1.0 - o);

        out.d_means[3 * g..3 * g + 3].copy_from_slice(&acc.d_mean[3 * g..3 * g + 3]);

        let raw = cloud.quat(g);
        let raw_norm =
            (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
        if !(raw_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian {g} has a zero quaternion"
            )));
        }
        let q = [
            raw[0] / raw_norm,
            raw[1] / raw_norm,
            raw[2] / raw_norm,
            raw[3] / raw_norm,
        ];
        let r = crate::model::quat_to_rotation(&raw)?;
        let ls = cloud.log_scale(g);
        let s = [ls[0].exp(), ls[1].exp(), ls[2].exp()];

        // dL/dSigma as a full symmetric matrix.
        let cg = &acc.d_cov[6 * g..6 * g + 6];
        let sig = [
            [cg[0], cg[1], cg[2]],
            [cg[1], cg[3], cg[4]],
            [cg[2], cg[4], cg[5]],
        ];
        // dL/dM = 2 M dL/dSigma with M = S R (M_kl = s_k R_kl).
        let mut d_m = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut acc_ab = 0.0;
                for j in 0..3 {
                    acc_ab += r[(a, j)] * sig[j][b];
                }
                d_m[a][b] = 2.0 * s[a] * acc_ab;
            }
        }
        // dL/ds_k = sum_l (dL/dM)_kl R_kl, chained through exp to log-scale;
        // dL/dR_kl = s_k (dL/dM)_kl.
        let mut d_r = [[0.0f64; 3]; 3];
        for k in 0..3 {
            let mut ds = 0.0;
            for l in 0..3 {
                ds += d_m[k][l] * r[(k, l)];
                d_r[k][l] = s[k] * d_m[k][l];
            }
            out.d_log_scales[3 * g + k] = ds * s[k];
        }
        let dq = chain_rotation_to_quat(&d_r, &q, raw_norm);
        out.d_quats[4 * g..4 * g + 4].copy_from_slice(&dq);
    }
    Ok(out)
}

fn validate_upstream(n_slices: usize, grid: &PixelGridSpec, upstream: &[Vec<f64>]) -> Result<()> {
    if upstream.len() != n_slices {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} slices, expected {}",
            upstream.len(),
            n_slices
        )));
    }
    for (k, u) in upstream.iter().enumerate() {
        if u.len() != grid.pixels() {
            return Err(Error::ShapeMismatch(format!(
                "upstream slice {k} has {} pixels, grid expects {}",
                u.len(),
                grid.pixels()
            )));
        }
    }
    Ok(())
}

/// Full backward pass over a set of posed planes.
pub fn backward_over_planes(
    cloud: &GaussianCloud,
    poses: &[SlicePose],
    grid: &PixelGridSpec,
    upstream: &[Vec<f64>],
    opts: &RenderOptions,
) -> Result<GradientSet> {
    opts.validate()?;
    grid.validate()?;
    validate_upstream(poses.len(), grid, upstream)?;
    let prep = PreparedCloud::new(cloud, opts)?;
    let mut total = Accum::zeros(cloud.len());
    for (pose, up) in poses.iter().zip(upstream) {
        accumulate_slice(&prep, pose, grid, up, opts, &mut total);
    }
    chain_to_parameters(cloud, &total)
}

/// Backward pass over every slice of a stack, with upstream per-pixel
/// `dL/dI_p` matching the stack's rendered images.
pub fn backward(
    cloud: &GaussianCloud,
    stack: &SliceStack,
    upstream: &[Vec<f64>],
    opts: &RenderOptions,
) -> Result<GradientSet> {
    backward_over_planes(cloud, &stack.poses, &stack.grid, upstream, opts)
}

/// Gradient of the loss with respect to the pixels' world coordinates,
/// `dL/dc_p = sum_g dL/dd_gp`. Unused during training (slice poses are fixed
/// inputs) but exposed for future pose refinement.
pub fn pixel_coordinate_gradients(
    cloud: &GaussianCloud,
    poses: &[SlicePose],
    grid: &PixelGridSpec,
    upstream: &[Vec<f64>],
    opts: &RenderOptions,
) -> Result<Vec<Vec<[f64; 3]>>> {
    opts.validate()?;
    grid.validate()?;
    validate_upstream(poses.len(), grid, upstream)?;
    let prep = PreparedCloud::new(cloud, opts)?;
    let cutoff = opts.cutoff();
    let finite = cutoff.is_finite();
    let mut out = Vec::with_capacity(poses.len());
    for (pose, up) in poses.iter().zip(upstream) {
        let mut grads = vec![[0.0f64; 3]; grid.pixels()];
        grads
            .par_chunks_mut(grid.width)
            .enumerate()
            .for_each(|(i, row)| {
                let (origin, step, dx) = row_basis(pose, grid, i);
                for (j, px) in row.iter_mut().enumerate() {
                    let w = up[i * grid.width + j];
                    if w == 0.0 {
                        continue;
                    }
                    let x = j as f64 * dx;
                    let c = [
                        origin[0] + x * step[0],
                        origin[1] + x * step[1],
                        origin[2] + x * step[2],
                    ];
                    for g in 0..prep.n {
                        let mu = prep.means[g];
                        let d = [c[0] - mu[0], c[1] - mu[1], c[2] - mu[2]];
                        if finite {
                            let r = prep.reach[g];
                            if d[0].abs() > r[0] || d[1].abs() > r[1] || d[2].abs() > r[2] {
                                continue;
                            }
                        }
                        let q2 = prep.inv_cov[g].quad_form(d);
                        if q2 > cutoff {
                            continue;
                        }
                        let common = w * prep.intensity[g] * prep.opacity[g] * (-0.5 * q2).exp();
                        let v = prep.inv_cov[g].mat_vec(d);
                        px[0] -= common * v[0];
                        px[1] -= common * v[1];
                        px[2] -= common * v[2];
                    }
                }
            });
        out.push(grads);
    }
    Ok(out)
}

/// Central-difference gradients of `loss_fn(rendered images)` with respect
/// to every stored parameter, using exact-mode rendering. This is the test
/// oracle for [`backward`]; it never touches the analytic gradient path.
///
pub fn finite_difference_gradients<F>(
    cloud: &GaussianCloud,
    stack: &SliceStack,
    loss_fn: F,
    h: f64,
) -> Result<GradientSet>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let opts = RenderOptions::exact();
    let n = cloud.len();
    let mut out = GradientSet::zeros(n);
    let mut work = cloud.clone();

    #[derive(Clone, Copy)]
    enum Slot {
        Mean,
        LogScale,
        Quat,
        OpacityLogit,
        Intensity,
    }
    fn slot_array<'a>(c: &'a mut GaussianCloud, slot: Slot) -> &'a mut Vec<f64> {
        match slot {
            Slot::Mean => &mut c.means,
            Slot::LogScale => &mut c.log_scales,
            Slot::Quat => &mut c.quats,
            Slot::OpacityLogit => &mut c.opacity_logits,
            Slot::Intensity => &mut c.intensities,
        }
    }
    let probe = |work: &mut GaussianCloud, slot: Slot, idx: usize| -> Result<f64> {
        let base = slot_array(work, slot)[idx];
        let plus = base + h;
        let minus = base - h;
        slot_array(work, slot)[idx] = plus;
        let l_plus = loss_fn(&render_sweep(work, &stack.poses, &stack.grid, &opts)?);
        slot_array(work, slot)[idx] = minus;
        let l_minus = loss_fn(&render_sweep(work, &stack.poses, &stack.grid, &opts)?);
        slot_array(work, slot)[idx] = base;
        Ok((l_plus - l_minus) / (plus - minus))
    };

    for k in 0..3 * n {
        out.d_means[k] = probe(&mut work, Slot::Mean, k)?;
        out.d_log_scales[k] = probe(&mut work, Slot::LogScale, k)?;
    }
    for k in 0..4 * n {
        out.d_quats[k] = probe(&mut work, Slot::Quat, k)?;
    }
    for k in 0..n {
        out.d_opacity_logits[k] = probe(&mut work, Slot::OpacityLogit, k)?;
        out.d_intensities[k] = probe(&mut work, Slot::Intensity, k)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianCloud, PixelGridSpec, Pose6D, SliceStack};
    use crate::rasterizer::{render_sweep, splat_pixel};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::empty();
        for _ in 0..n {
            let quat = loop {
                let q = [
                    rng.random_range(-1.0..1.0f64),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                if q.iter().map(|v| v * v).sum::<f64>() > 0.1 {
                    break q;
                }
            };
            c.push(
                [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.4..0.4),
                ],
                [
                    rng.random_range(-0.8..0.4),
                    rng.random_range(-0.8..0.4),
                    rng.random_range(-0.8..0.4),
                ],
                quat,
                rng.random_range(-1.0..2.0),
                rng.random_range(-1.0..1.0),
            );
        }
        c
    }

    fn random_stack(rng: &mut ChaCha8Rng, slices: usize, side: usize) -> SliceStack {
        let grid = PixelGridSpec::unit_square(side, side);
        let mut images = Vec::new();
        let mut poses = Vec::new();
        for _ in 0..slices {
            images.push(
                (0..grid.pixels())
                    .map(|_| rng.random_range(0.0..1.0f32))
                    .collect(),
            );
            poses.push(Pose6D::new(
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                ],
                [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ],
            ));
        }
        SliceStack::from_parts(images, poses, grid).unwrap()
    }

    /// Mean-squared pixel error against the stack's images.
    fn mse_loss(stack: &SliceStack) -> impl Fn(&[Vec<f64>]) -> f64 + '_ {
        move |imgs: &[Vec<f64>]| {
            let mut total = 0.0;
            let mut count = 0usize;
            for (k, img) in imgs.iter().enumerate() {
                for (p, &v) in img.iter().enumerate() {
                    let d = v - stack.images[k][p] as f64;
                    total += d * d;
                    count += 1;
                }
            }
            total / count as f64
        }
    }

    fn mse_upstream(stack: &SliceStack, rendered: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let count: usize = rendered.iter().map(|i| i.len()).sum();
        rendered
            .iter()
            .enumerate()
            .map(|(k, img)| {
                img.iter()
                    .enumerate()
                    .map(|(p, &v)| 2.0 * (v - stack.images[k][p] as f64) / count as f64)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 6);
        let stack = random_stack(&mut rng, 2, 6);
        let upstream: Vec<Vec<f64>> = stack.images.iter().map(|i| vec![0.0; i.len()]).collect();
        let g = backward(&cloud, &stack, &upstream, &RenderOptions::exact()).unwrap();
        assert_eq!(g, GradientSet::zeros(cloud.len()));
    }

    #[test]
    fn zero_offset_symmetry() {
        // One Gaussian centered exactly on the single pixel: mean gradient
        // vanishes by odd symmetry and dL/dI_g = w * o_g.
        let mut cloud = GaussianCloud::empty();
        cloud.push([0.0; 3], [0.1; 3], [1.0, 0.0, 0.0, 0.0], 0.7, 0.4);
        let grid = PixelGridSpec {
            width: 1,
            height: 1,
            extent: [-0.5, 0.5, -0.5, 0.5],
        };
        let stack =
            SliceStack::from_parts(vec![vec![0.0]], vec![Pose6D::identity()], grid).unwrap();
        let w = 1.3;
        let g = backward(&cloud, &stack, &[vec![w]], &RenderOptions::exact()).unwrap();
        assert_eq!(&g.d_means[..], &[0.0, 0.0, 0.0]);
        approx::assert_relative_eq!(g.d_intensities[0], w * cloud.opacity(0), epsilon = 1e-12);
    }

    #[test]
    fn matches_finite_differences_mse_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for round in 0..3 {
            let cloud = random_cloud(&mut rng, 5);
            let stack = random_stack(&mut rng, 1, 8);
            let opts = RenderOptions::exact();
            let rendered = render_sweep(&cloud, &stack.poses, &stack.grid, &opts).unwrap();
            let upstream = mse_upstream(&stack, &rendered);
            let analytic = backward(&cloud, &stack, &upstream, &opts).unwrap();
            let fd = finite_difference_gradients(&cloud, &stack, mse_loss(&stack), 1e-4).unwrap();
            let err = max_relative_error(&analytic, &fd, 1e-8);
            assert!(err < 1e-4, "round {round}: max rel error {err}");
        }
    }

    #[test]
    fn matches_finite_differences_linear_loss() {
        // Linear loss with a fixed random upstream: L = sum_p u_p * I_p.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 4);
        let stack = random_stack(&mut rng, 2, 6);
        let upstream: Vec<Vec<f64>> = stack
            .images
            .iter()
            .map(|img| img.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let u = upstream.clone();
        let linear = move |imgs: &[Vec<f64>]| {
            imgs.iter()
                .zip(&u)
                .map(|(img, uu)| img.iter().zip(uu).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let analytic = backward(&cloud, &stack, &upstream, &RenderOptions::exact()).unwrap();
        let fd = finite_difference_gradients(&cloud, &stack, linear, 1e-4).unwrap();
        let err = max_relative_error(&analytic, &fd, 1e-8);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn fd_exact_for_quadratic_in_intensity() {
        // Rendering is linear in intensity, so an MSE loss is quadratic in
        // it and central differences are exact up to rounding.
        let mut cloud = GaussianCloud::empty();
        cloud.push([0.0, 0.0, 0.0], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, 0.25);
        let grid = PixelGridSpec::unit_square(4, 4);
        let stack =
            SliceStack::from_parts(vec![vec![0.3; 16]], vec![Pose6D::identity()], grid).unwrap();
        let opts = RenderOptions::exact();
        let rendered = render_sweep(&cloud, &stack.poses, &stack.grid, &opts).unwrap();
        let upstream = mse_upstream(&stack, &rendered);
        let analytic = backward(&cloud, &stack, &upstream, &opts).unwrap();
        // Dyadic step keeps theta +- h exactly representable in f32, so the
        // only residual is f64 rounding in the loss evaluation.
        let h = 2.0f64.powi(-12);
        let fd = finite_difference_gradients(&cloud, &stack, mse_loss(&stack), h).unwrap();
        let rel = (analytic.d_intensities[0] - fd.d_intensities[0]).abs()
            / fd.d_intensities[0].abs().max(1e-300);
        assert!(rel < 1e-9, "intensity FD not exact: rel {rel}");
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let cloud = GaussianCloud::empty();
        let stack =
            SliceStack::from_parts(vec![], vec![], PixelGridSpec::unit_square(2, 2)).unwrap();
        assert!(finite_difference_gradients(&cloud, &stack, |_| 0.0, 0.0).is_err());
    }

    #[test]
    fn constant_loss_gives_zero_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 2);
        let stack = random_stack(&mut rng, 1, 4);
        let fd = finite_difference_gradients(&cloud, &stack, |_| 7.25, 1e-4).unwrap();
        assert_eq!(fd, GradientSet::zeros(2));
    }

    #[test]
    fn quaternion_gradient_tangent_to_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cloud = random_cloud(&mut rng, 8);
        cloud.renormalize_quats(0.0);
        let stack = random_stack(&mut rng, 1, 8);
        let opts = RenderOptions::exact();
        let rendered = render_sweep(&cloud, &stack.poses, &stack.grid, &opts).unwrap();
        let upstream = mse_upstream(&stack, &rendered);
        let g = backward(&cloud, &stack, &upstream, &opts).unwrap();
        for i in 0..cloud.len() {
            let q = cloud.quat(i);
            let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let dq = &g.d_quats[4 * i..4 * i + 4];
            let dot: f64 = q.iter().zip(dq).map(|(a, b)| a / n * b).sum();
            assert!(dot.abs() < 1e-8, "gaussian {i}: tangency residual {dot}");
        }
    }

    #[test]
    fn backward_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cloud = random_cloud(&mut rng, 5);
        let stack = random_stack(&mut rng, 1, 6);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            vec![(0..36).map(|_| rng.random_range(-1.0..1.0)).collect()]
        };
        let u1 = mk(&mut rng);
        let u2 = mk(&mut rng);
        let sum: Vec<Vec<f64>> = vec![u1[0].iter().zip(&u2[0]).map(|(a, b)| a + b).collect()];
        let opts = RenderOptions::exact();
        let g1 = backward(&cloud, &stack, &u1, &opts).unwrap();
        let g2 = backward(&cloud, &stack, &u2, &opts).unwrap();
        let gs = backward(&cloud, &stack, &sum, &opts).unwrap();
        let mut combined = g1.clone();
        combined.add_assign(&g2);
        assert!(max_relative_error(&gs, &combined, 1e-8) < 1e-6);
    }

    #[test]
    fn pixel_coordinate_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cloud = random_cloud(&mut rng, 6);
        let stack = random_stack(&mut rng, 1, 4);
        let opts = RenderOptions::exact();
        let w = 0.85;
        let upstream = vec![vec![w; stack.grid.pixels()]];
        let grads =
            pixel_coordinate_gradients(&cloud, &stack.poses, &stack.grid, &upstream, &opts)
                .unwrap();
        let h = 1e-5;
        for (i, j) in [(0usize, 0usize), (2, 3), (3, 1)] {
            let c = crate::model::pixel_to_world(&stack.poses[0], &stack.grid, i, j).unwrap();
            for axis in 0..3 {
                let mut cp = [c.x, c.y, c.z];
                cp[axis] += h;
                let lp = w * splat_pixel(&cloud, cp, &opts).unwrap();
                cp[axis] -= 2.0 * h;
                let lm = w * splat_pixel(&cloud, cp, &opts).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let got = grads[0][i * stack.grid.width + j][axis];
                assert!(
                    (got - fd).abs() / (fd.abs() + 1e-8) < 1e-4,
                    "pixel ({i},{j}) axis {axis}: {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 2);
        let stack = random_stack(&mut rng, 2, 4);
        let bad = vec![vec![0.0; stack.grid.pixels()]];
        assert!(backward(&cloud, &stack, &bad, &RenderOptions::exact()).is_err());
        let bad2 = vec![vec![0.0; 3], vec![0.0; 3]];
        assert!(backward(&cloud, &stack, &bad2, &RenderOptions::exact()).is_err());
    }

    #[test]
    fn ordered_and_unordered_reduction_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 10);
        let stack = random_stack(&mut rng, 2, 16);
        let opts = RenderOptions::exact();
        let rendered = render_sweep(&cloud, &stack.poses, &stack.grid, &opts).unwrap();
        let upstream = mse_upstream(&stack, &rendered);
        let ordered = backward(&cloud, &stack, &upstream, &opts).unwrap();
        let mut fast = opts;
        fast.ordered_reduction = false;
        let unordered = backward(&cloud, &stack, &upstream, &fast).unwrap();
        assert!(max_relative_error(&unordered, &ordered, 1e-8) < 1e-6);
    }
}
