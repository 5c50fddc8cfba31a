//! Bit-exact persistence: slice stacks, cloud checkpoints, exported
//! volumes, and grayscale ingestion.
//!
//! Every format pairs a versioned magic header with little-endian binary
//! payloads; numeric payloads are never written as text. Stacks live in a
//! directory (human-readable `manifest.json` beside a raw `slices.bin`),
//! checkpoints and volumes are single files. All failure modes map to
//! typed errors carrying byte offsets.
//!
//! Writes go through a temp file plus rename, so concurrent readers never
//! observe a partially written artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianCloud, PixelGridSpec, Pose6D, SliceStack, SweepMeta};
use crate::rasterizer::{PreparedCloud, RenderOptions};

const STACK_MAGIC: &[u8; 4] = b"SSTK";
const CLOUD_MAGIC: &[u8; 4] = b"GCPT";
const VOLUME_MAGIC: &[u8; 4] = b"SVOL";
const STACK_VERSION: u32 = 1;
const CLOUD_VERSION: u32 = 1;
const VOLUME_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Little-endian readers/writers
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Self {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload {
                path: self.path.clone(),
                offset: self.pos as u64,
                needed: n as u64,
                available: (self.buf.len() - self.pos) as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * count)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: what.to_string(),
            });
        }
        Ok(())
    }

    fn expect_version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::VersionMismatch {
                path: self.path.clone(),
                found,
                expected,
            });
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes via a sibling temp file and rename so readers never see a
/// partial artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp.partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Slice stacks
// ---------------------------------------------------------------------------

/// Human-readable sidecar for a stack directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub version: u32,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub extent: [f64; 4],
    /// Raw little-endian 32-bit floats, row-major, all slices concatenated.
    pub pixel_encoding: String,
    pub payload: String,
    pub poses: Vec<Pose6D>,
    pub order: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepMeta>,
}

/// Writes `manifest.json` and `slices.bin` under `dir`.
pub fn save_stack(stack: &SliceStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = StackManifest {
        version: STACK_VERSION,
        count: stack.len(),
        width: stack.grid.width,
        height: stack.grid.height,
        extent: stack.grid.extent,
        pixel_encoding: "f32le".to_string(),
        payload: "slices.bin".to_string(),
        poses: stack.pose6ds.clone(),
        order: stack.order.clone(),
        sweep: stack.sweep.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    write_atomic(&manifest_path, json.as_bytes())?;

    let mut payload = Vec::with_capacity(16 + 4 * stack.len() * stack.grid.pixels());
    payload.extend_from_slice(STACK_MAGIC);
    payload.extend_from_slice(&STACK_VERSION.to_le_bytes());
    payload.extend_from_slice(&(stack.len() as u32).to_le_bytes());
    payload.extend_from_slice(&(stack.grid.width as u32).to_le_bytes());
    payload.extend_from_slice(&(stack.grid.height as u32).to_le_bytes());
    for img in &stack.images {
        put_f32s(&mut payload, img.iter().copied());
    }
    write_atomic(&dir.join("slices.bin"), &payload)
}

/// Loads a stack directory written by [`save_stack`].
pub fn load_stack(dir: &Path) -> Result<SliceStack> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StackManifest =
        serde_json::from_str(&json).map_err(|e| Error::Manifest {
            path: manifest_path.clone(),
            msg: e.to_string(),
        })?;
    if manifest.version != STACK_VERSION {
        return Err(Error::VersionMismatch {
            path: manifest_path,
            found: manifest.version,
            expected: STACK_VERSION,
        });
    }
    if manifest.pixel_encoding != "f32le" {
        return Err(Error::Manifest {
            path: manifest_path,
            msg: format!("unsupported pixel encoding '{}'", manifest.pixel_encoding),
        });
    }

    let payload_path = dir.join(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let mut r = Reader::new(&bytes, &payload_path);
    r.expect_magic(STACK_MAGIC, "slice stack")?;
    r.expect_version(STACK_VERSION)?;
    let count = r.u32()? as usize;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    if count != manifest.count || width != manifest.width || height != manifest.height {
        return Err(Error::CountMismatch {
            path: payload_path,
            declared: (manifest.count * manifest.width * manifest.height) as u64,
            actual: (count * width * height) as u64,
        });
    }
    if manifest.poses.len() != count || manifest.order.len() != count {
        return Err(Error::CountMismatch {
            path: manifest_path,
            declared: count as u64,
            actual: manifest.poses.len() as u64,
        });
    }
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        images.push(r.f32_vec(width * height)?);
    }
    if !r.done() {
        return Err(Error::CountMismatch {
            path: payload_path,
            declared: r.pos as u64,
            actual: bytes.len() as u64,
        });
    }

    let grid = PixelGridSpec {
        width,
        height,
        extent: manifest.extent,
    };
    let mut stack = SliceStack::from_parts(images, manifest.poses, grid)?;
    stack.order = manifest.order;
    stack.sweep = manifest.sweep;
    Ok(stack)
}

// ---------------------------------------------------------------------------
// Cloud checkpoints
// ---------------------------------------------------------------------------

/// A loaded checkpoint: the cloud (promoted from the stored f32 arrays),
/// plus the optional trainer-state blob and config echo.
#[derive(Debug, Clone)]
pub struct CloudCheckpoint {
    pub cloud: GaussianCloud,
    pub state: Option<Vec<u8>>,
    pub config_json: Option<String>,
}

/// Serializes a cloud checkpoint: five f32 parameter arrays in declared
/// order, an optional opaque state blob, and an optional config echo.
pub fn save_cloud(
    path: &Path,
    cloud: &GaussianCloud,
    state: Option<&[u8]>,
    config_json: Option<&str>,
) -> Result<()> {
    cloud.validate()?;
    let n = cloud.len();
    let mut out = Vec::with_capacity(16 + 48 * n);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    put_f32s(&mut out, cloud.means.iter().map(|&v| v as f32));
    put_f32s(&mut out, cloud.log_scales.iter().map(|&v| v as f32));
    put_f32s(&mut out, cloud.quats.iter().map(|&v| v as f32));
    put_f32s(&mut out, cloud.opacity_logits.iter().map(|&v| v as f32));
    put_f32s(&mut out, cloud.intensities.iter().map(|&v| v as f32));
    match state {
        Some(blob) => {
            out.push(1);
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(blob);
        }
        None => out.push(0),
    }
    match config_json {
        Some(cfg) => {
            out.push(1);
            out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
            out.extend_from_slice(cfg.as_bytes());
        }
        None => out.push(0),
    }
    write_atomic(path, &out)
}

/// Loads a checkpoint; quaternions are NOT renormalized (bytes preserved).
pub fn load_cloud(path: &Path) -> Result<CloudCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(CLOUD_MAGIC, "cloud checkpoint")?;
    r.expect_version(CLOUD_VERSION)?;
    let n = r.u32()? as usize;
    let means = r.f32_vec(3 * n)?;
    let log_scales = r.f32_vec(3 * n)?;
    let quats = r.f32_vec(4 * n)?;
    let opacity_logits = r.f32_vec(n)?;
    let intensities = r.f32_vec(n)?;
    let promote = |v: Vec<f32>| v.into_iter().map(|x| x as f64).collect::<Vec<f64>>();
    let cloud = GaussianCloud {
        means: promote(means),
        log_scales: promote(log_scales),
        quats: promote(quats),
        opacity_logits: promote(opacity_logits),
        intensities: promote(intensities),
    };
    let state = if r.u8()? == 1 {
        let len = r.u64()? as usize;
        Some(r.take(len)?.to_vec())
    } else {
        None
    };
    let config_json = if r.u8()? == 1 {
        let len = r.u64()? as usize;
        let raw = r.take(len)?;
        Some(String::from_utf8(raw.to_vec()).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("config echo is not UTF-8: {e}"),
        })?)
    } else {
        None
    };
    if !r.done() {
        return Err(Error::CountMismatch {
            path: path.to_path_buf(),
            declared: r.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(CloudCheckpoint {
        cloud,
        state,
        config_json,
    })
}

// ---------------------------------------------------------------------------
// Volume export
// ---------------------------------------------------------------------------

/// Dense scalar grid with cell-center sampling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dim: [usize; 3],
    /// World position of the first cell center.
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    /// x fastest: `data[(iz * dim_y + iy) * dim_x + ix]`.
    pub data: Vec<f32>,
}

impl VolumeGrid {
    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * ix as f64,
            self.origin[1] + self.spacing[1] * iy as f64,
            self.origin[2] + self.spacing[2] * iz as f64,
        ]
    }

    /// Trilinear interpolation; zero outside the cell-center lattice.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let mut i0 = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let u = (p[k] - self.origin[k]) / self.spacing[k];
            let f = u.floor();
            i0[k] = f as isize;
            frac[k] = u - f;
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
                        continue;
                    }
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    let idx = (iz as usize * self.dim[1] + iy as usize) * self.dim[0] + ix as usize;
                    acc += w * self.data[idx] as f64;
                }
            }
        }
        acc
    }
}

/// Samples the cloud's forward splat at the cell centers of a regular grid
/// over `[lo, hi]`, in exact mode.
pub fn export_volume(
    cloud: &GaussianCloud,
    bounds: ([f64; 3], [f64; 3]),
    resolution: [usize; 3],
) -> Result<VolumeGrid> {
    use rayon::prelude::*;
    let (lo, hi) = bounds;
    if resolution.iter().any(|&r| r < 1) {
        return Err(Error::InvalidArgument(format!(
            "volume resolution must be >= 1 per axis, got {resolution:?}"
        )));
    }
    if !lo.iter().zip(&hi).all(|(a, b)| b > a) {
        return Err(Error::InvalidArgument(format!(
            "volume bounds must be well-ordered, got {lo:?}..{hi:?}"
        )));
    }
    let spacing = [
        (hi[0] - lo[0]) / resolution[0] as f64,
        (hi[1] - lo[1]) / resolution[1] as f64,
        (hi[2] - lo[2]) / resolution[2] as f64,
    ];
    let origin = [
        lo[0] + 0.5 * spacing[0],
        lo[1] + 0.5 * spacing[1],
        lo[2] + 0.5 * spacing[2],
    ];
    let opts = RenderOptions::exact();
    let prep = PreparedCloud::new(cloud, &opts)?;
    let [nx, ny, nz] = resolution;
    let mut data = vec![0.0f32; nx * ny * nz];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(iz, plane)| {
        let z = origin[2] + spacing[2] * iz as f64;
        for iy in 0..ny {
            let y = origin[1] + spacing[1] * iy as f64;
            for ix in 0..nx {
                let x = origin[0] + spacing[0] * ix as f64;
                plane[iy * nx + ix] =
                    prep.splat_range([x, y, z], 0, prep.n, f64::INFINITY) as f32;
            }
        }
    });
    Ok(VolumeGrid {
        dim: resolution,
        origin,
        spacing,
        data,
    })
}

pub fn save_volume(path: &Path, vol: &VolumeGrid) -> Result<()> {
    let mut out = Vec::with_capacity(64 + 4 * vol.data.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in vol.dim {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in vol.origin.iter().chain(vol.spacing.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(&mut out, vol.data.iter().copied());
    write_atomic(path, &out)
}

pub fn load_volume(path: &Path) -> Result<VolumeGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(VOLUME_MAGIC, "volume grid")?;
    r.expect_version(VOLUME_VERSION)?;
    let dim = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let data = r.f32_vec(dim[0] * dim[1] * dim[2])?;
    if !r.done() {
        return Err(Error::CountMismatch {
            path: path.to_path_buf(),
            declared: r.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(VolumeGrid {
        dim,
        origin,
        spacing,
        data,
    })
}

// ---------------------------------------------------------------------------
// Grayscale ingestion
// ---------------------------------------------------------------------------

/// Loads an 8-bit grayscale image, mapping values to [0, 1] by /255.
/// Ingestion is the only lossy step in the pipeline.
pub fn load_grayscale_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("image decode failed: {e}"),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok((w, h, data))
}

/// Builds a stack from a directory of grayscale images (sorted by file
/// name), synthesizing equally spaced sweep poses — the acquisition
/// assumption used for untracked freehand sweeps.
pub fn stack_from_image_dir(
    dir: &Path,
    extent: [f64; 4],
    axis: crate::model::SweepAxis,
    angle_range: [f64; 2],
    pivot: [f64; 3],
) -> Result<SliceStack> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no grayscale images found under {}",
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(files.len());
    let mut dims = None;
    for f in &files {
        let (w, h, data) = load_grayscale_image(f)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {w}x{h}, expected {}x{}",
                    f.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        images.push(data);
    }
    let (w, h) = dims.unwrap();
    let grid = PixelGridSpec {
        width: w,
        height: h,
        extent,
    };
    let n = images.len();
    let angles: Vec<f64> = if n == 1 {
        vec![0.5 * (angle_range[0] + angle_range[1])]
    } else {
        (0..n)
            .map(|k| {
                angle_range[0] + k as f64 * (angle_range[1] - angle_range[0]) / (n - 1) as f64
            })
            .collect()
    };
    let pose6ds: Vec<Pose6D> = angles
        .iter()
        .map(|&a| crate::phantom::sweep_pose(axis, a, pivot))
        .collect();
    let mut stack = SliceStack::from_parts(images, pose6ds, grid)?;
    stack.sweep = Some(SweepMeta {
        axis,
        angles,
        pivot,
    });
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pixel_to_world, SweepAxis};
    use crate::phantom::{make_phantom, sample_sweep, PhantomConfig, SweepSpec};
    use crate::rasterizer::render_slice;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("slicesplat-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn phantom_stack(slices: usize, side: usize) -> SliceStack {
        let vol = make_phantom(&PhantomConfig {
            dim: 33,
            spacing: 0.5,
            ..PhantomConfig::default()
        })
        .unwrap();
        sample_sweep(&vol, &SweepSpec::covering(&vol, SweepAxis::Sagittal, slices, side)).unwrap()
    }

    #[test]
    fn stack_round_trip_bitwise() {
        let dir = tmpdir("stack");
        let stack = phantom_stack(3, 12);
        save_stack(&stack, &dir).unwrap();
        let loaded = load_stack(&dir).unwrap();
        assert_eq!(loaded.images, stack.images);
        assert_eq!(loaded.pose6ds, stack.pose6ds);
        assert_eq!(loaded.grid, stack.grid);
        assert_eq!(loaded.order, stack.order);
        assert_eq!(loaded.sweep, stack.sweep);

        // Second save produces byte-identical artifacts.
        let dir2 = tmpdir("stack2");
        save_stack(&loaded, &dir2).unwrap();
        assert_eq!(
            fs::read(dir.join("slices.bin")).unwrap(),
            fs::read(dir2.join("slices.bin")).unwrap()
        );
        assert_eq!(
            fs::read(dir.join("manifest.json")).unwrap(),
            fs::read(dir2.join("manifest.json")).unwrap()
        );
        let _ = fs::remove_dir_all(dir);
        let _ = fs::remove_dir_all(dir2);
    }

    #[test]
    fn empty_stack_round_trips() {
        let dir = tmpdir("empty");
        let stack =
            SliceStack::from_parts(vec![], vec![], PixelGridSpec::unit_square(4, 4)).unwrap();
        save_stack(&stack, &dir).unwrap();
        let loaded = load_stack(&dir).unwrap();
        assert!(loaded.is_empty());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn truncated_payload_is_a_typed_error() {
        let dir = tmpdir("trunc");
        let stack = phantom_stack(2, 8);
        save_stack(&stack, &dir).unwrap();
        let payload = dir.join("slices.bin");
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 7]).unwrap();
        match load_stack(&dir) {
            Err(Error::TruncatedPayload { .. }) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tmpdir("ver");
        let stack = phantom_stack(1, 6);
        save_stack(&stack, &dir).unwrap();
        let payload = dir.join("slices.bin");
        let mut bytes = fs::read(&payload).unwrap();
        bytes[4] = 99;
        fs::write(&payload, &bytes).unwrap();
        match load_stack(&dir) {
            Err(Error::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tmpdir("count");
        let stack = phantom_stack(2, 8);
        save_stack(&stack, &dir).unwrap();
        // Manifest says 3 slices, payload holds 2.
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path).unwrap();
        fs::write(&manifest_path, json.replace("\"count\": 2", "\"count\": 3")).unwrap();
        match load_stack(&dir) {
            Err(Error::CountMismatch { .. }) => {}
            other => panic!("expected CountMismatch, got {other:?}"),
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn cloud_checkpoint_round_trip() {
        let dir = tmpdir("cloud");
        let mut cloud = GaussianCloud::empty();
        // f32-representable values round-trip exactly through the arrays.
        cloud.push([0.5, -0.25, 1.5], [0.5; 3], [1.0, 0.0, 0.0, 0.0], 1.0, 0.5);
        cloud.push([2.0, 0.75, -3.5], [0.25; 3], [0.5, 0.5, 0.5, 0.5], -1.0, -0.125);
        let path = dir.join("ckpt.bin");
        let state = vec![7u8, 1, 4, 1, 4, 2];
        save_cloud(&path, &cloud, Some(&state), Some("{\"epochs\":3}")).unwrap();
        let loaded = load_cloud(&path).unwrap();
        assert_eq!(loaded.cloud, cloud);
        assert_eq!(loaded.state.as_deref(), Some(&state[..]));
        assert_eq!(loaded.config_json.as_deref(), Some("{\"epochs\":3}"));

        // Byte-identical re-save.
        let path2 = dir.join("ckpt2.bin");
        save_cloud(&path2, &loaded.cloud, Some(&state), Some("{\"epochs\":3}")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn empty_cloud_round_trips() {
        let dir = tmpdir("cloud0");
        let path = dir.join("empty.bin");
        save_cloud(&path, &GaussianCloud::empty(), None, None).unwrap();
        let loaded = load_cloud(&path).unwrap();
        assert!(loaded.cloud.is_empty());
        assert!(loaded.state.is_none());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn cloud_version_bump_rejected() {
        let dir = tmpdir("cloudver");
        let path = dir.join("c.bin");
        save_cloud(&path, &GaussianCloud::empty(), None, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_cloud(&path),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn quaternions_not_renormalized_on_load() {
        let dir = tmpdir("quat");
        let mut cloud = GaussianCloud::empty();
        cloud.push([0.0; 3], [0.0; 3], [2.0, 0.0, 0.0, 0.0], 0.0, 1.0);
        let path = dir.join("q.bin");
        save_cloud(&path, &cloud, None, None).unwrap();
        let loaded = load_cloud(&path).unwrap();
        assert_eq!(loaded.cloud.quat(0), [2.0, 0.0, 0.0, 0.0]);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn export_volume_empty_and_peak() {
        let empty = export_volume(&GaussianCloud::empty(), ([0.0; 3], [1.0; 3]), [4, 4, 4]).unwrap();
        assert!(empty.data.iter().all(|&v| v == 0.0));

        let mut cloud = GaussianCloud::empty();
        cloud.push([0.1, 0.2, -0.1], [-0.7; 3], [1.0, 0.0, 0.0, 0.0], 2.0, 1.0);
        let vol = export_volume(&cloud, ([-1.0; 3], [1.0; 3]), [9, 9, 9]).unwrap();
        let mut best = (0usize, 0usize, 0usize);
        let mut best_v = f32::MIN;
        let mut best_dist = f64::INFINITY;
        for iz in 0..9 {
            for iy in 0..9 {
                for ix in 0..9 {
                    let v = vol.data[(iz * 9 + iy) * 9 + ix];
                    if v > best_v {
                        best_v = v;
                        best = (ix, iy, iz);
                    }
                    let c = vol.cell_center(ix, iy, iz);
                    let d = (c[0] - 0.1).powi(2) + (c[1] - 0.2).powi(2) + (c[2] + 0.1).powi(2);
                    if d < best_dist {
                        best_dist = d;
                    }
                }
            }
        }
        let c = vol.cell_center(best.0, best.1, best.2);
        let d = (c[0] - 0.1).powi(2) + (c[1] - 0.2).powi(2) + (c[2] + 0.1).powi(2);
        assert!((d - best_dist).abs() < 1e-12, "peak voxel is not the nearest center");
    }

    #[test]
    fn volume_resampled_along_slice_matches_render() {
        let mut cloud = GaussianCloud::empty();
        cloud.push([0.3, -0.2, 0.1], [0.5; 3], [1.0, 0.0, 0.0, 0.0], 1.0, 0.6);
        cloud.push([-0.5, 0.4, -0.3], [0.3; 3], [0.8, 0.1, -0.3, 0.2], 0.5, -0.4);
        let vol = export_volume(&cloud, ([-8.0; 3], [8.0; 3]), [128, 128, 128]).unwrap();

        let grid = PixelGridSpec {
            width: 12,
            height: 12,
            extent: [-4.0, 4.0, -4.0, 4.0],
        };
        let pose = crate::model::pose_from_6d(&Pose6D::new([0.3, 0.2, -0.1], [0.1, 0.0, 0.2]))
            .unwrap();
        let rendered = render_slice(&cloud, &pose, &grid, &RenderOptions::exact()).unwrap();
        let mut max_diff = 0.0f64;
        for i in 0..grid.height {
            for j in 0..grid.width {
                let c = pixel_to_world(&pose, &grid, i, j).unwrap();
                let v = vol.sample_trilinear([c.x, c.y, c.z]);
                max_diff = max_diff.max((v - rendered[i * grid.width + j]).abs());
            }
        }
        assert!(max_diff < 1e-3, "resample deviation {max_diff}");
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tmpdir("vol");
        let mut cloud = GaussianCloud::empty();
        cloud.push([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 1.0, 0.5);
        let vol = export_volume(&cloud, ([-1.0; 3], [1.0; 3]), [5, 6, 7]).unwrap();
        let path = dir.join("v.bin");
        save_volume(&path, &vol).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded, vol);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn grayscale_import_maps_by_255() {
        let dir = tmpdir("gray");
        let path = dir.join("img.png");
        let img = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 10 + y * 3) as u8]));
        img.save(&path).unwrap();
        let (w, h, data) = load_grayscale_image(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(data[0], 0.0);
        assert_eq!(data[1], 10.0 / 255.0);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn stack_from_images_synthesizes_equal_spacing() {
        let dir = tmpdir("imgdir");
        for k in 0..3 {
            let img = image::GrayImage::from_fn(6, 6, |x, _| image::Luma([(40 * k + x) as u8]));
            img.save(dir.join(format!("frame_{k:03}.png"))).unwrap();
        }
        let stack = stack_from_image_dir(
            &dir,
            [-1.0, 1.0, -1.0, 1.0],
            SweepAxis::Sagittal,
            [-0.5, 0.5],
            [0.0, 0.0, -1.0],
        )
        .unwrap();
        assert_eq!(stack.len(), 3);
        let meta = stack.sweep.as_ref().unwrap();
        assert_eq!(meta.angles, vec![-0.5, 0.0, 0.5]);
        let _ = fs::remove_dir_all(dir);
    }
}
