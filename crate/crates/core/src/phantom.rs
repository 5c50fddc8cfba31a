//! Synthetic ground truth: labeled ellipsoidal-shell volumes and angular
//! sweep extraction with exact per-slice 6D poses.
//!
//! The label volume is a cubic voxel grid with three values: exterior 0,
//! interior 0.5, border 1. Sweeps rotate a slice plane about an axis
//! through a fixed pivot, covering a symmetric angle range; sagittal sweeps
//! rotate the world y = 0 plane about the x axis, transversal sweeps rotate
//! the x = 0 plane about the y axis. Both base planes share the z axis, so
//! the two sweep types agree along that central line.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    pose_from_6d, PixelGridSpec, Pose6D, SliceStack, SweepAxis, SweepMeta,
};

/// Voxel grid with labels {0, 0.5, 1}. Voxel `(ix, iy, iz)` is centered at
/// `origin + spacing * (ix, iy, iz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dim: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
    /// Row-major with x fastest: `labels[(iz * dim_y + iy) * dim_x + ix]`.
    pub labels: Vec<f32>,
}

impl LabelVolume {
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dim[1] + iy) * self.dim[0] + ix
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing * ix as f64,
            self.origin[1] + self.spacing * iy as f64,
            self.origin[2] + self.spacing * iz as f64,
        ]
    }

    /// Physical half-extent of the voxel-center lattice per axis.
    pub fn half_span(&self) -> [f64; 3] {
        [
            0.5 * self.spacing * (self.dim[0] - 1) as f64,
            0.5 * self.spacing * (self.dim[1] - 1) as f64,
            0.5 * self.spacing * (self.dim[2] - 1) as f64,
        ]
    }

    /// Trilinear interpolation at a world point; zero outside the lattice.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let mut u = [0.0f64; 3];
        for k in 0..3 {
            u[k] = (p[k] - self.origin[k]) / self.spacing;
        }
        let mut i0 = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let f = u[k].floor();
            i0[k] = f as isize;
            frac[k] = u[k] - f;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ix = i0[0] + dx;
                    let iy = i0[1] + dy;
                    let iz = i0[2] + dz;
                    if ix < 0
                        || iy < 0
                        || iz < 0
                        || ix >= self.dim[0] as isize
                        || iy >= self.dim[1] as isize
                        || iz >= self.dim[2] as isize
                    {
                        continue; // out-of-volume taps contribute 0
                    }
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    acc += w * self.labels[self.index(ix as usize, iy as usize, iz as usize)]
                        as f64;
                }
            }
        }
        acc
    }

    /// Nearest-neighbor lookup; zero outside the lattice.
    pub fn sample_nearest(&self, p: [f64; 3]) -> f64 {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let u = ((p[k] - self.origin[k]) / self.spacing).round();
            if u < 0.0 || u >= self.dim[k] as f64 {
                return 0.0;
            }
            idx[k] = u as usize;
        }
        self.labels[self.index(idx[0], idx[1], idx[2])] as f64
    }
}

/// Shape and discretization of the procedural shell phantom.
///
/// `semi_axes` and `wall_thickness` are fractions of the cube side; the
/// shell is the region between the outer ellipsoid and the inner one at
/// `semi_axes - wall_thickness`. `pose` places the ellipsoid inside the
/// cube (in normalized cube coordinates). The default spacing sizes the
/// world span to roughly one scene unit per pixel of the default 256 px
/// sweeps, which keeps the standard initialization scale (about 1.65
/// units) at a sensible footprint of a few pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dim: usize,
    pub spacing: f64,
    pub semi_axes: [f64; 3],
    pub wall_thickness: f64,
    pub pose: Pose6D,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            spacing: 2.0,
            semi_axes: [0.4, 0.3, 0.2],
            wall_thickness: 0.05,
            pose: Pose6D::identity(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument("phantom dim must be >= 2".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::InvalidArgument("phantom spacing must be > 0".into()));
        }
        if !(self.wall_thickness > 0.0) {
            return Err(Error::InvalidArgument(
                "wall thickness must be positive".into(),
            ));
        }
        if !self.semi_axes.iter().all(|&a| a >= self.wall_thickness) {
            return Err(Error::InvalidArgument(format!(
                "semi-axes {:?} must be at least the wall thickness {}",
                self.semi_axes, self.wall_thickness
            )));
        }
        Ok(())
    }
}

/// Builds the labeled shell phantom: interior 0.5, border 1, exterior 0.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    let d = cfg.dim;
    let half = 0.5 * cfg.spacing * (d - 1) as f64;
    let origin = [-half; 3];
    let pose = pose_from_6d(&cfg.pose)?;
    let inv_rot = pose.rotation.transpose();
    let outer = cfg.semi_axes;
    let inner = [
        outer[0] - cfg.wall_thickness,
        outer[1] - cfg.wall_thickness,
        outer[2] - cfg.wall_thickness,
    ];

    let mut labels = vec![0.0f32; d * d * d];
    labels
        .par_chunks_mut(d * d)
        .enumerate()
        .for_each(|(iz, plane)| {
            let nz = iz as f64 / (d - 1) as f64 - 0.5;
            for iy in 0..d {
                let ny = iy as f64 / (d - 1) as f64 - 0.5;
                for ix in 0..d {
                    let nx = ix as f64 / (d - 1) as f64 - 0.5;
                    // Ellipsoid frame: p = R^T n - t.
                    let v = inv_rot * nalgebra::Vector3::new(nx, ny, nz) - pose.translation;
                    let q_outer = (v.x / outer[0]).powi(2)
                        + (v.y / outer[1]).powi(2)
                        + (v.z / outer[2]).powi(2);
                    if q_outer > 1.0 {
                        continue;
                    }
                    let q_inner = if inner.iter().all(|&a| a > 0.0) {
                        (v.x / inner[0]).powi(2)
                            + (v.y / inner[1]).powi(2)
                            + (v.z / inner[2]).powi(2)
                    } else {
                        f64::INFINITY
                    };
                    plane[iy * d + ix] = if q_inner <= 1.0 { 0.5 } else { 1.0 };
                }
            }
        });

    Ok(LabelVolume {
        dim: [d; 3],
        spacing: cfg.spacing,
        origin,
        labels,
    })
}

/// Interpolation used when sampling slices from a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// Angular sweep description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// `[lo, hi]` rotation angles in radians.
    pub angle_range: [f64; 2],
    pub n_slices: usize,
    pub grid: PixelGridSpec,
    /// Rotation pivot; `None` puts it at the center of the volume's low-z
    /// face (the probe apex).
    pub pivot: Option<[f64; 3]>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl SweepSpec {
    /// Spec whose grid covers the central cross-section of `vol`.
    pub fn covering(vol: &LabelVolume, axis: SweepAxis, n_slices: usize, side_px: usize) -> Self {
        let h = vol.half_span();
        let r = h[0].max(h[1]).max(h[2]);
        Self {
            axis,
            angle_range: [-60f64.to_radians(), 60f64.to_radians()],
            n_slices,
            grid: PixelGridSpec {
                width: side_px,
                height: side_px,
                extent: [-r, r, -r, r],
            },
            pivot: None,
            interpolation: Interpolation::Trilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_slices < 1 {
            return Err(Error::InvalidArgument("n_slices must be >= 1".into()));
        }
        if !(self.angle_range[1] >= self.angle_range[0]) {
            return Err(Error::InvalidArgument(format!(
                "angle range must be ordered, got {:?}",
                self.angle_range
            )));
        }
        Ok(())
    }

    /// Slice angles: uniform over the range, endpoints inclusive; a single
    /// slice sits at the midpoint.
    pub fn angles(&self) -> Vec<f64> {
        let [lo, hi] = self.angle_range;
        if self.n_slices == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..self.n_slices)
            .map(|k| lo + k as f64 * (hi - lo) / (self.n_slices - 1) as f64)
            .collect()
    }
}

/// 6D pose of the slice plane rotated by `angle` about the sweep axis
/// through `pivot`.
///
/// The base plane (angle 0) is world `y = 0` for sagittal sweeps and
/// `x = 0` for transversal ones, with the plane-local grid centered on the
/// world origin. Translation happens before rotation, matching
/// `c = R (p + t)`.
pub fn sweep_pose(axis: SweepAxis, angle: f64, pivot: [f64; 3]) -> Pose6D {
    use nalgebra::Vector3;
    let rot = match axis {
        // Rot_x(angle) * Rot_x(-90 deg): plane normal swings from +y.
        SweepAxis::Sagittal => [angle - std::f64::consts::FRAC_PI_2, 0.0, 0.0],
        // Rot_y(angle) * Rot_y(+90 deg): plane normal swings from +x.
        SweepAxis::Transversal => [0.0, angle + std::f64::consts::FRAC_PI_2, 0.0],
    };
    // c = A R0 p + A (R0 t0 - q) + q with t0 = 0 must take the form
    // R (p + t): t = R^T q - R0^T q.
    let q = Vector3::from(pivot);
    let r_full = pose_from_6d(&Pose6D::new(rot, [0.0; 3])).unwrap().rotation;
    let base_rot = match axis {
        SweepAxis::Sagittal => [-std::f64::consts::FRAC_PI_2, 0.0, 0.0],
        SweepAxis::Transversal => [0.0, std::f64::consts::FRAC_PI_2, 0.0],
    };
    let r0 = pose_from_6d(&Pose6D::new(base_rot, [0.0; 3])).unwrap().rotation;
    let t = r_full.transpose() * q - r0.transpose() * q;
    Pose6D::new(rot, [t.x, t.y, t.z])
}

/// Extracts a posed slice stack from a label volume.
pub fn sample_sweep(vol: &LabelVolume, spec: &SweepSpec) -> Result<SliceStack> {
    spec.validate()?;
    let pivot = spec.pivot.unwrap_or_else(|| {
        let h = vol.half_span();
        [0.0, 0.0, -h[2]]
    });
    let angles = spec.angles();
    let pose6ds: Vec<Pose6D> = angles
        .iter()
        .map(|&a| sweep_pose(spec.axis, a, pivot))
        .collect();
    let poses = pose6ds
        .iter()
        .map(pose_from_6d)
        .collect::<Result<Vec<_>>>()?;

    let images: Vec<Vec<f32>> = poses
        .par_iter()
        .map(|pose| {
            let mut img = vec![0.0f32; spec.grid.pixels()];
            for i in 0..spec.grid.height {
                let y = spec.grid.y_at(i);
                for j in 0..spec.grid.width {
                    let c = pose.plane_point(spec.grid.x_at(j), y);
                    let v = match spec.interpolation {
                        Interpolation::Trilinear => vol.sample_trilinear([c.x, c.y, c.z]),
                        Interpolation::Nearest => vol.sample_nearest([c.x, c.y, c.z]),
                    };
                    img[i * spec.grid.width + j] = v as f32;
                }
            }
            img
        })
        .collect();

    let mut stack = SliceStack::from_parts(images, pose6ds, spec.grid)?;
    stack.sweep = Some(SweepMeta {
        axis: spec.axis,
        angles,
        pivot,
    });
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_phantom(dim: usize) -> LabelVolume {
        make_phantom(&PhantomConfig {
            dim,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn center_is_interior_corner_is_exterior() {
        let vol = small_phantom(33);
        let c = vol.dim[0] / 2;
        assert_eq!(vol.labels[vol.index(c, c, c)], 0.5);
        assert_eq!(vol.labels[vol.index(0, 0, 0)], 0.0);
        let last = vol.dim[0] - 1;
        assert_eq!(vol.labels[vol.index(last, last, last)], 0.0);
    }

    #[test]
    fn thickness_equal_to_semi_axis_leaves_no_interior() {
        let vol = make_phantom(&PhantomConfig {
            dim: 33,
            semi_axes: [0.3; 3],
            wall_thickness: 0.3,
            ..PhantomConfig::default()
        })
        .unwrap();
        assert!(vol.labels.iter().all(|&v| v != 0.5));
        assert!(vol.labels.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn invalid_shapes_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.wall_thickness = 0.0;
        assert!(make_phantom(&cfg).is_err());
        cfg.wall_thickness = 0.5;
        cfg.semi_axes = [0.4, 0.3, 0.2];
        assert!(make_phantom(&cfg).is_err());
    }

    #[test]
    fn label_histogram_matches_ellipsoid_volumes() {
        let cfg = PhantomConfig::default();
        let vol = make_phantom(&cfg).unwrap();
        // Lattice points are spaced 1/(dim-1) across the unit cube, so each
        // carries a quadrature cell of (dim-1)^-3.
        let cells = ((cfg.dim - 1) as f64).powi(3);
        let interior = vol.labels.iter().filter(|&&v| v == 0.5).count() as f64 / cells;
        let border = vol.labels.iter().filter(|&&v| v == 1.0).count() as f64 / cells;
        let vol_of = |a: [f64; 3]| 4.0 / 3.0 * std::f64::consts::PI * a[0] * a[1] * a[2];
        let t = cfg.wall_thickness;
        let inner = [
            cfg.semi_axes[0] - t,
            cfg.semi_axes[1] - t,
            cfg.semi_axes[2] - t,
        ];
        let expect_interior = vol_of(inner);
        let expect_border = vol_of(cfg.semi_axes) - expect_interior;
        assert!(
            (interior - expect_interior).abs() / expect_interior < 0.02,
            "interior {interior} vs analytic {expect_interior}"
        );
        assert!(
            (border - expect_border).abs() / expect_border < 0.02,
            "border {border} vs analytic {expect_border}"
        );
    }

    #[test]
    fn trilinear_reproduces_voxel_centers_exactly() {
        let vol = small_phantom(17);
        for (ix, iy, iz) in [(0, 0, 0), (8, 8, 8), (16, 3, 9), (5, 11, 2)] {
            let p = vol.voxel_center(ix, iy, iz);
            assert_eq!(
                vol.sample_trilinear(p),
                vol.labels[vol.index(ix, iy, iz)] as f64
            );
            assert_eq!(
                vol.sample_nearest(p),
                vol.labels[vol.index(ix, iy, iz)] as f64
            );
        }
        // Far outside the lattice.
        assert_eq!(vol.sample_trilinear([1e3, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn sweep_angles_uniform_and_midpoint_for_single_slice() {
        let vol = small_phantom(9);
        let mut spec = SweepSpec::covering(&vol, SweepAxis::Sagittal, 100, 8);
        let angles = spec.angles();
        assert_eq!(angles.len(), 100);
        assert_relative_eq!(angles[0], -60f64.to_radians(), epsilon = 1e-15);
        assert_relative_eq!(angles[99], 60f64.to_radians(), epsilon = 1e-15);
        let delta = 120f64.to_radians() / 99.0;
        for w in angles.windows(2) {
            assert_relative_eq!(w[1] - w[0], delta, epsilon = 1e-12);
        }
        spec.n_slices = 1;
        assert_eq!(spec.angles(), vec![0.0]);
    }

    #[test]
    fn sweep_poses_are_rigid() {
        let vol = small_phantom(9);
        let spec = SweepSpec::covering(&vol, SweepAxis::Transversal, 7, 8);
        let stack = sample_sweep(&vol, &spec).unwrap();
        for pose in &stack.poses {
            pose.validate(1e-9).unwrap();
        }
        assert_eq!(stack.len(), 7);
    }

    #[test]
    fn central_slice_annulus_point_symmetric() {
        let vol = small_phantom(65);
        let mut spec = SweepSpec::covering(&vol, SweepAxis::Sagittal, 1, 33);
        spec.angle_range = [0.0, 0.0];
        let stack = sample_sweep(&vol, &spec).unwrap();
        let img = &stack.images[0];
        let (w, h) = (spec.grid.width, spec.grid.height);
        let mut distinct = std::collections::BTreeSet::new();
        for i in 0..h {
            for j in 0..w {
                let a = img[i * w + j];
                let b = img[(h - 1 - i) * w + (w - 1 - j)];
                assert!(
                    (a - b).abs() < 1e-6,
                    "({i},{j}) breaks 180-degree symmetry: {a} vs {b}"
                );
                distinct.insert((a * 1e4) as i64);
            }
        }
        // The annulus cross-section must actually show structure.
        assert!(distinct.len() > 2);
    }

    #[test]
    fn sagittal_and_transversal_agree_on_central_line() {
        let vol = small_phantom(65);
        // Odd slice counts so angle 0 is included in both sweeps.
        let sag = sample_sweep(&vol, &SweepSpec::covering(&vol, SweepAxis::Sagittal, 5, 33))
            .unwrap();
        let tra = sample_sweep(
            &vol,
            &SweepSpec::covering(&vol, SweepAxis::Transversal, 5, 33),
        )
        .unwrap();
        let mid_slice = 2;
        let side = 33usize;
        let mid_px = (side - 1) / 2;
        let s_img = &sag.images[mid_slice];
        let t_img = &tra.images[mid_slice];
        let mut max_diff = 0.0f64;
        for k in 0..side {
            // Sagittal central column vs transversal central row sample the
            // same world z-axis points.
            let a = s_img[k * side + mid_px] as f64;
            let b = t_img[mid_px * side + k] as f64;
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-5, "central line disagreement {max_diff}");
    }

    #[test]
    fn pose6d_round_trip_through_stack_construction() {
        // sample_sweep returns Pose6D and SlicePose; they must agree.
        let vol = small_phantom(9);
        let spec = SweepSpec::covering(&vol, SweepAxis::Sagittal, 3, 8);
        let stack = sample_sweep(&vol, &spec).unwrap();
        for (p6, pose) in stack.pose6ds.iter().zip(&stack.poses) {
            let rebuilt = pose_from_6d(p6).unwrap();
            assert!((rebuilt.rotation - pose.rotation).abs().max() < 1e-15);
        }
    }
}
