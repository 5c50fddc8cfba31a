//! Scene representation, pose algebra and pixel-to-world geometry.
//!
//! Conventions used throughout the crate:
//! - Quaternions are Hamilton, scalar-first `(w, x, y, z)`.
//! - Euler angles are fixed-axis XYZ: `R = Rz(rz) * Ry(ry) * Rx(rx)`,
//!   i.e. the X rotation is applied first.
//! - Slice poses apply translation *before* rotation: a plane-local point
//!   `p` maps to world coordinates as `c = R * (p + t)`.
//! - Per-axis scales are stored in log-space and opacity in logit-space so
//!   positivity / boundedness hold by construction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function; opacities are `sigmoid(logit)`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Gaussian cloud
// ---------------------------------------------------------------------------

/// Structure-of-arrays scene: `N` anisotropic 3D Gaussians.
///
/// Parameters are held in `f64`; checkpoints store the declared `f32`
/// arrays (plus exact master copies in the optimizer-state blob).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    /// World-space centers, flat `N x 3`.
    pub means: Vec<f64>,
    /// Log of per-axis standard deviations, flat `N x 3`.
    pub log_scales: Vec<f64>,
    /// Rotations as quaternions `(w, x, y, z)`, flat `N x 4`.
    pub quats: Vec<f64>,
    /// Opacity logits, `N`; opacity is `sigmoid(logit)` in (0, 1).
    pub opacity_logits: Vec<f64>,
    /// Scalar radiance, `N`; unbounded and may be negative.
    pub intensities: Vec<f64>,
}

impl GaussianCloud {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one Gaussian.
    pub fn push(
        &mut self,
        mean: [f64; 3],
        log_scale: [f64; 3],
        quat: [f64; 4],
        opacity_logit: f64,
        intensity: f64,
    ) {
        self.means.extend_from_slice(&mean);
        self.log_scales.extend_from_slice(&log_scale);
        self.quats.extend_from_slice(&quat);
        self.opacity_logits.push(opacity_logit);
        self.intensities.push(intensity);
    }

    pub fn mean(&self, g: usize) -> [f64; 3] {
        let b = 3 * g;
        [self.means[b], self.means[b + 1], self.means[b + 2]]
    }

    pub fn log_scale(&self, g: usize) -> [f64; 3] {
        let b = 3 * g;
        [
            self.log_scales[b],
            self.log_scales[b + 1],
            self.log_scales[b + 2],
        ]
    }

    pub fn quat(&self, g: usize) -> [f64; 4] {
        let b = 4 * g;
        [
            self.quats[b],
            self.quats[b + 1],
            self.quats[b + 2],
            self.quats[b + 3],
        ]
    }

    pub fn opacity(&self, g: usize) -> f64 {
        sigmoid(self.opacity_logits[g])
    }

    pub fn intensity(&self, g: usize) -> f64 {
        self.intensities[g]
    }

    /// Checks array lengths agree and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.means.len() != 3 * n
            || self.log_scales.len() != 3 * n
            || self.quats.len() != 4 * n
            || self.intensities.len() != n
        {
            return Err(Error::ShapeMismatch(format!(
                "cloud arrays disagree: means {} log_scales {} quats {} opacity {} intensity {}",
                self.means.len(),
                self.log_scales.len(),
                self.quats.len(),
                self.opacity_logits.len(),
                self.intensities.len()
            )));
        }
        let finite = |a: &[f64]| a.iter().all(|v| v.is_finite());
        if !(finite(&self.means)
            && finite(&self.log_scales)
            && finite(&self.quats)
            && finite(&self.opacity_logits)
            && finite(&self.intensities))
        {
            return Err(Error::InvalidArgument(
                "cloud contains non-finite parameters".into(),
            ));
        }
        Ok(())
    }

    /// Concatenates two clouds (used e.g. by additivity checks).
    pub fn concat(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.means.extend_from_slice(&other.means);
        out.log_scales.extend_from_slice(&other.log_scales);
        out.quats.extend_from_slice(&other.quats);
        out.opacity_logits.extend_from_slice(&other.opacity_logits);
        out.intensities.extend_from_slice(&other.intensities);
        out
    }

    /// Renormalizes stored quaternions to unit length.
    ///
    /// Quaternions whose norm is already within `tol` of 1 are left bitwise
    /// untouched, so a no-op optimizer step cannot perturb frozen rotations.
    pub fn renormalize_quats(&mut self, tol: f64) {
        for g in 0..self.len() {
            let q = self.quat(g);
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > tol {
                let b = 4 * g;
                for k in 0..4 {
                    self.quats[b + k] = q[k] / norm;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

/// Rigid pose of one image plane. Plane-local point `p` maps to world
/// coordinates as `c = rotation * (p + translation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SlicePose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Verifies `R^T R = I` and `det R = +1` within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > tol {
            return Err(Error::InvalidArgument(format!(
                "pose rotation is not orthonormal (deviation {dev:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "pose rotation has determinant {det}, expected +1"
            )));
        }
        Ok(())
    }

    /// Maps a plane-local point `(x, y, 0)` to world coordinates.
    #[inline]
    pub fn plane_point(&self, x: f64, y: f64) -> Vector3<f64> {
        self.rotation * (Vector3::new(x, y, 0.0) + self.translation)
    }
}

/// Six-dof pose vector: fixed-axis XYZ Euler angles (radians) plus a
/// translation applied before rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub rot: [f64; 3],
    pub trans: [f64; 3],
}

impl Pose6D {
    pub fn identity() -> Self {
        Self {
            rot: [0.0; 3],
            trans: [0.0; 3],
        }
    }

    pub fn new(rot: [f64; 3], trans: [f64; 3]) -> Self {
        Self { rot, trans }
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Builds a slice pose from a 6D vector: `R = Rz * Ry * Rx`, `t` verbatim.
pub fn pose_from_6d(pose: &Pose6D) -> Result<SlicePose> {
    if !pose.rot.iter().chain(pose.trans.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(
            "6D pose has non-finite components".into(),
        ));
    }
    let rotation = rot_z(pose.rot[2]) * rot_y(pose.rot[1]) * rot_x(pose.rot[0]);
    Ok(SlicePose {
        rotation,
        translation: Vector3::from(pose.trans),
    })
}

/// Recovers the 6D vector from a pose. Exact round-trip holds for Euler
/// angles in (-pi/2, pi/2); outside that range an equivalent angle set is
/// returned.
pub fn pose_to_6d(pose: &SlicePose) -> Pose6D {
    let r = &pose.rotation;
    let ry = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let (rx, rz) = if r[(2, 0)].abs() < 1.0 - 1e-12 {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        // Gimbal lock: fold everything into rx.
        ((-r[(1, 2)]).atan2(r[(1, 1)]), 0.0)
    };
    Pose6D {
        rot: [rx, ry, rz],
        trans: [pose.translation.x, pose.translation.y, pose.translation.z],
    }
}

// ---------------------------------------------------------------------------
// Quaternions
// ---------------------------------------------------------------------------

/// Rotation matrix of a quaternion `(w, x, y, z)`, normalized internally.
/// Errors on the zero quaternion.
pub fn quat_to_rotation(q: &[f64; 4]) -> Result<Matrix3<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(
            "quaternion must be nonzero and finite".into(),
        ));
    }
    let w = q[0] / n;
    let x = q[1] / n;
    let y = q[2] / n;
    let z = q[3] / n;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Hamilton product `a * b`, scalar-first.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj(q: &[f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

// ---------------------------------------------------------------------------
// Symmetric 3x3 matrices (compact six-coefficient storage)
// ---------------------------------------------------------------------------

/// Symmetric 3x3 matrix stored as six upper-triangular coefficients in the
/// order `(xx, xy, xz, yy, yz, zz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat3(pub [f64; 6]);

impl SymMat3 {
    pub fn identity() -> Self {
        SymMat3([1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    }

    #[inline]
    pub fn mat_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[1] * v[0] + m[3] * v[1] + m[4] * v[2],
            m[2] * v[0] + m[4] * v[1] + m[5] * v[2],
        ]
    }

    /// Quadratic form `v^T M v`, unrolled component-wise.
    #[inline]
    pub fn quad_form(&self, v: [f64; 3]) -> f64 {
        let m = &self.0;
        m[0] * v[0] * v[0]
            + m[3] * v[1] * v[1]
            + m[5] * v[2] * v[2]
            + 2.0 * (m[1] * v[0] * v[1] + m[2] * v[0] * v[2] + m[4] * v[1] * v[2])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let m = &self.0;
        Matrix3::new(m[0], m[1], m[2], m[1], m[3], m[4], m[2], m[4], m[5])
    }

    /// Compacts a (near-)symmetric matrix, averaging off-diagonal halves.
    pub fn from_matrix_symmetrized(m: &Matrix3<f64>) -> Self {
        SymMat3([
            m[(0, 0)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            m[(1, 1)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            m[(2, 2)],
        ])
    }
}

/// Builds the covariance `Sigma = R^T S^2 R` (with `S = diag(exp(log_scale))`,
/// `R` from the unit quaternion) and its inverse `R^T S^-2 R`.
///
/// Both are returned in compact six-coefficient form. This is the
/// factorization `Sigma = (S R)^T (S R)`.
pub fn covariance_from_params(log_scale: &[f64; 3], quat: &[f64; 4]) -> Result<(SymMat3, SymMat3)> {
    let r = quat_to_rotation(quat)?;
    let s2 = [
        (2.0 * log_scale[0]).exp(),
        (2.0 * log_scale[1]).exp(),
        (2.0 * log_scale[2]).exp(),
    ];
    let inv_s2 = [1.0 / s2[0], 1.0 / s2[1], 1.0 / s2[2]];

    // Sigma_ij = sum_k R_ki * s_k^2 * R_kj; same shape for the inverse.
    let mut cov = [0.0; 6];
    let mut inv = [0.0; 6];
    let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    for (out, (i, j)) in pairs.iter().enumerate() {
        let mut c = 0.0;
        let mut ic = 0.0;
        for k in 0..3 {
            let rr = r[(k, *i)] * r[(k, *j)];
            c += s2[k] * rr;
            ic += inv_s2[k] * rr;
        }
        cov[out] = c;
        inv[out] = ic;
    }
    Ok((SymMat3(cov), SymMat3(inv)))
}

// ---------------------------------------------------------------------------
// Pixel grids and slice stacks
// ---------------------------------------------------------------------------

/// In-plane pixel lattice: pixel counts plus physical extent
/// `[a_x, b_x] x [a_y, b_y]` in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelGridSpec {
    pub width: usize,
    pub height: usize,
    /// `[a_x, b_x, a_y, b_y]`.
    pub extent: [f64; 4],
}

impl PixelGridSpec {
    /// Square grid mapping pixels onto a physical square of side 1 centered
    /// at the origin.
    pub fn unit_square(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            extent: [-0.5, 0.5, -0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidArgument(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        let [ax, bx, ay, by] = self.extent;
        if !(bx > ax && by > ay) || !self.extent.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid extent must be finite and well-ordered, got {:?}",
                self.extent
            )));
        }
        Ok(())
    }

    /// Physical x of column `j`; a single-column grid sits at the midpoint.
    #[inline]
    pub fn x_at(&self, j: usize) -> f64 {
        let [ax, bx, ..] = self.extent;
        if self.width == 1 {
            0.5 * (ax + bx)
        } else {
            ax + j as f64 * (bx - ax) / (self.width - 1) as f64
        }
    }

    /// Physical y of row `i`; a single-row grid sits at the midpoint.
    #[inline]
    pub fn y_at(&self, i: usize) -> f64 {
        let [.., ay, by] = self.extent;
        if self.height == 1 {
            0.5 * (ay + by)
        } else {
            ay + i as f64 * (by - ay) / (self.height - 1) as f64
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// World coordinate of pixel `(i, j)` on a posed slice plane:
/// `c = R * ((x_j, y_i, 0) + t)`.
pub fn pixel_to_world(
    pose: &SlicePose,
    grid: &PixelGridSpec,
    i: usize,
    j: usize,
) -> Result<Vector3<f64>> {
    if i >= grid.height || j >= grid.width {
        return Err(Error::InvalidArgument(format!(
            "pixel index ({i}, {j}) outside {}x{} grid",
            grid.height, grid.width
        )));
    }
    Ok(pose.plane_point(grid.x_at(j), grid.y_at(i)))
}

/// Kind of sweep a stack was extracted from (metadata carried by stacks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sagittal,
    Transversal,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepAxis::Sagittal => write!(f, "sagittal"),
            SweepAxis::Transversal => write!(f, "transversal"),
        }
    }
}

/// Sweep metadata attached to a stack when it came from an angular sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub axis: SweepAxis,
    /// Rotation angle of each slice, radians.
    pub angles: Vec<f64>,
    pub pivot: [f64; 3],
}

/// Ordered set of 2D intensity images with per-slice poses and a shared
/// pixel-grid spec.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    /// Row-major `height x width` intensities in [0, 1], one per slice.
    pub images: Vec<Vec<f32>>,
    pub poses: Vec<SlicePose>,
    pub pose6ds: Vec<Pose6D>,
    pub grid: PixelGridSpec,
    /// Temporal index per slice.
    pub order: Vec<u32>,
    pub sweep: Option<SweepMeta>,
}

impl SliceStack {
    /// Builds a stack from images and 6D poses, deriving rigid poses.
    pub fn from_parts(
        images: Vec<Vec<f32>>,
        pose6ds: Vec<Pose6D>,
        grid: PixelGridSpec,
    ) -> Result<Self> {
        grid.validate()?;
        if images.len() != pose6ds.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} poses",
                images.len(),
                pose6ds.len()
            )));
        }
        for (k, img) in images.iter().enumerate() {
            if img.len() != grid.pixels() {
                return Err(Error::ShapeMismatch(format!(
                    "slice {k} has {} pixels, grid expects {}",
                    img.len(),
                    grid.pixels()
                )));
            }
        }
        let poses = pose6ds
            .iter()
            .map(pose_from_6d)
            .collect::<Result<Vec<_>>>()?;
        let order = (0..images.len() as u32).collect();
        Ok(Self {
            images,
            poses,
            pose6ds,
            grid,
            order,
            sweep: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Target image of slice `k` promoted to f64.
    pub fn image_f64(&self, k: usize) -> Vec<f64> {
        self.images[k].iter().map(|&v| v as f64).collect()
    }
}
