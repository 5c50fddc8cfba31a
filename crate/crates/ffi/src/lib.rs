//! C ABI for the slicesplat reconstruction library.
//!
//! Conventions:
//! - Objects cross the boundary as opaque handles (`SsStack*`, `SsCloud*`,
//!   `SsVolume*`) created and released by paired `_load`/`_new`/`_free`
//!   functions. Handles are not thread-safe for concurrent mutation.
//! - Every fallible function returns an [`SsStatus`]; on failure a
//!   thread-local message is readable via [`ss_last_error_message`] until
//!   the next failing call on the same thread.
//! - Compound operations (phantom generation, initialization, training)
//!   take the same JSON config documents the CLI uses.
//! - Strings returned as `char*` must be released with [`ss_string_free`].
//!
//! The matching header is generated into `include/slicesplat.h` at build
//! time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use slicesplat::experiments::{build_init_cloud, RunConfig};
use slicesplat::io;
use slicesplat::model::{pose_from_6d, GaussianCloud, PixelGridSpec, Pose6D, SliceStack};
use slicesplat::phantom::{make_phantom, sample_sweep};
use slicesplat::rasterizer::{render_slice, RenderOptions};
use slicesplat::trainer::{evaluate, train, TrainConfig};
use slicesplat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    DegenerateInput = 5,
    InternalError = 6,
}

/// Opaque handle to an ordered set of posed slices.
pub struct SsStack {
    inner: SliceStack,
}

/// Opaque handle to a Gaussian scene.
pub struct SsCloud {
    inner: GaussianCloud,
}

/// Opaque handle to an exported dense volume.
pub struct SsVolume {
    inner: io::VolumeGrid,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let safe = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = safe);
}

fn status_of(err: &Error) -> SsStatus {
    match err {
        Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::Config(_) => {
            SsStatus::InvalidArgument
        }
        Error::DegenerateInput(_) => SsStatus::DegenerateInput,
        Error::Io { .. } => SsStatus::IoError,
        Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::TruncatedPayload { .. }
        | Error::CountMismatch { .. }
        | Error::Manifest { .. } => SsStatus::FormatError,
        Error::NonFiniteLoss { .. } => SsStatus::InternalError,
    }
}

fn fail(err: Error) -> SsStatus {
    let code = status_of(&err);
    set_error(&err.to_string());
    code
}

fn fail_null(what: &str) -> SsStatus {
    set_error(&format!("{what} must not be null"));
    SsStatus::NullArgument
}

/// # Safety
/// `raw` must be null or a valid NUL-terminated C string.
unsafe fn cstr<'a>(raw: *const c_char, what: &str) -> Result<&'a str, SsStatus> {
    if raw.is_null() {
        return Err(fail_null(what));
    }
    CStr::from_ptr(raw).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        SsStatus::InvalidArgument
    })
}

fn leak_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread. Valid until the next
/// failing call on the same thread; never freed by the caller.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer previously returned by a `ss_*` function
/// documented to require [`ss_string_free`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Stacks
// ---------------------------------------------------------------------------

/// Loads a stack directory into a new handle.
///
/// # Safety
/// `dir` must be a valid C string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_load(dir: *const c_char, out: *mut *mut SsStack) -> SsStatus {
    if out.is_null() {
        return fail_null("out");
    }
    let dir = match cstr(dir, "dir") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match io::load_stack(Path::new(dir)) {
        Ok(stack) => {
            *out = Box::into_raw(Box::new(SsStack { inner: stack }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Writes a stack to a directory.
///
/// # Safety
/// `stack` must be a live handle from this library; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_save(stack: *const SsStack, dir: *const c_char) -> SsStatus {
    if stack.is_null() {
        return fail_null("stack");
    }
    let dir = match cstr(dir, "dir") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match io::save_stack(&(*stack).inner, Path::new(dir)) {
        Ok(()) => SsStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Generates a phantom and extracts one sweep, all from a run-config JSON
/// document (the same schema the CLI accepts).
///
/// # Safety
/// `config_json` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_from_phantom(
    config_json: *const c_char,
    out: *mut *mut SsStack,
) -> SsStatus {
    if out.is_null() {
        return fail_null("out");
    }
    let json = match cstr(config_json, "config_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let run = || -> Result<SliceStack, Error> {
        let cfg = RunConfig::from_json(json)?;
        let vol = make_phantom(&cfg.phantom)?;
        let spec = cfg.sweep.to_spec(&vol, cfg.sweep.axis);
        sample_sweep(&vol, &spec)
    };
    match run() {
        Ok(stack) => {
            *out = Box::into_raw(Box::new(SsStack { inner: stack }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `stack` must be null or a live handle; double frees are undefined.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_free(stack: *mut SsStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

/// # Safety
/// `stack` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_slice_count(stack: *const SsStack) -> usize {
    if stack.is_null() {
        return 0;
    }
    (*stack).inner.len()
}

/// # Safety
/// `stack` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_width(stack: *const SsStack) -> usize {
    if stack.is_null() {
        return 0;
    }
    (*stack).inner.grid.width
}

/// # Safety
/// `stack` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_height(stack: *const SsStack) -> usize {
    if stack.is_null() {
        return 0;
    }
    (*stack).inner.grid.height
}

/// Copies one slice's pixels (row-major, width*height floats) into `buf`.
///
/// # Safety
/// `stack` must be a live handle; `buf` must point to at least `buf_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn ss_stack_image(
    stack: *const SsStack,
    index: usize,
    buf: *mut f32,
    buf_len: usize,
) -> SsStatus {
    if stack.is_null() {
        return fail_null("stack");
    }
    if buf.is_null() {
        return fail_null("buf");
    }
    let inner = &(*stack).inner;
    if index >= inner.len() {
        set_error(&format!(
            "slice index {index} out of range ({} slices)",
            inner.len()
        ));
        return SsStatus::InvalidArgument;
    }
    let img = &inner.images[index];
    if buf_len < img.len() {
        set_error(&format!("buffer holds {buf_len} floats, need {}", img.len()));
        return SsStatus::InvalidArgument;
    }
    ptr::copy_nonoverlapping(img.as_ptr(), buf, img.len());
    SsStatus::Ok
}

// ---------------------------------------------------------------------------
// Clouds
// ---------------------------------------------------------------------------

/// Loads a cloud checkpoint.
///
/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_load(path: *const c_char, out: *mut *mut SsCloud) -> SsStatus {
    if out.is_null() {
        return fail_null("out");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match io::load_cloud(Path::new(path)) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(SsCloud { inner: ckpt.cloud }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Saves a cloud checkpoint (without trainer state).
///
/// # Safety
/// `cloud` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_save(cloud: *const SsCloud, path: *const c_char) -> SsStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match io::save_cloud(Path::new(path), &(*cloud).inner, None, None) {
        Ok(()) => SsStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `cloud` must be null or a live handle; double frees are undefined.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_free(cloud: *mut SsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// # Safety
/// `cloud` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_len(cloud: *const SsCloud) -> usize {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).inner.len()
}

/// Parameter array selector for [`ss_cloud_params`].
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SsParamArray {
    /// N x 3 world means.
    Means = 0,
    /// N x 3 log scales.
    LogScales = 1,
    /// N x 4 quaternions (w, x, y, z).
    Quats = 2,
    /// N opacity logits.
    OpacityLogits = 3,
    /// N intensities.
    Intensities = 4,
}

/// Copies one parameter array (f64, layout per [`SsParamArray`]) into
/// `buf`; writes the required length to `len_out` and copies only when
/// `buf_len` suffices. Call with `buf = NULL` to query the length.
///
/// # Safety
/// `cloud` must be a live handle; `buf` null or valid for `buf_len`
/// doubles; `len_out` null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_params(
    cloud: *const SsCloud,
    which: SsParamArray,
    buf: *mut f64,
    buf_len: usize,
    len_out: *mut usize,
) -> SsStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    let inner = &(*cloud).inner;
    let arr: &[f64] = match which {
        SsParamArray::Means => &inner.means,
        SsParamArray::LogScales => &inner.log_scales,
        SsParamArray::Quats => &inner.quats,
        SsParamArray::OpacityLogits => &inner.opacity_logits,
        SsParamArray::Intensities => &inner.intensities,
    };
    if !len_out.is_null() {
        *len_out = arr.len();
    }
    if buf.is_null() {
        return SsStatus::Ok;
    }
    if buf_len < arr.len() {
        set_error(&format!("buffer holds {buf_len} doubles, need {}", arr.len()));
        return SsStatus::InvalidArgument;
    }
    ptr::copy_nonoverlapping(arr.as_ptr(), buf, arr.len());
    SsStatus::Ok
}

/// Builds an initial cloud for a stack from a run-config JSON document
/// (its `init` section and the train seed drive placement).
///
/// # Safety
/// `config_json` must be a valid C string; `stack` a live handle; `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_init(
    config_json: *const c_char,
    stack: *const SsStack,
    out: *mut *mut SsCloud,
) -> SsStatus {
    if out.is_null() {
        return fail_null("out");
    }
    if stack.is_null() {
        return fail_null("stack");
    }
    let json = match cstr(config_json, "config_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let run = || -> Result<GaussianCloud, Error> {
        let cfg = RunConfig::from_json(json)?;
        let seed = cfg.train.as_ref().map(|t| t.seed).unwrap_or(0);
        build_init_cloud(&(*stack).inner, &cfg.init, seed)
    };
    match run() {
        Ok(cloud) => {
            *out = Box::into_raw(Box::new(SsCloud { inner: cloud }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------------------
// Training, rendering, evaluation
// ---------------------------------------------------------------------------

/// Trains `init_cloud` against `stack` under a train-config JSON document,
/// producing a new cloud handle. When `report_json_out` is non-null it
/// receives a JSON summary (release with [`ss_string_free`]).
///
/// # Safety
/// `train_config_json` must be a valid C string; `stack` and `init_cloud`
/// live handles; `out` a valid pointer; `report_json_out` null or valid.
#[no_mangle]
pub unsafe extern "C" fn ss_train(
    train_config_json: *const c_char,
    stack: *const SsStack,
    init_cloud: *const SsCloud,
    out: *mut *mut SsCloud,
    report_json_out: *mut *mut c_char,
) -> SsStatus {
    if out.is_null() {
        return fail_null("out");
    }
    if stack.is_null() {
        return fail_null("stack");
    }
    if init_cloud.is_null() {
        return fail_null("init_cloud");
    }
    let json = match cstr(train_config_json, "train_config_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let cfg: TrainConfig = match serde_json::from_str(json) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("train config: {e}"));
            return SsStatus::InvalidArgument;
        }
    };
    match train(&(*stack).inner, &(*init_cloud).inner, &cfg) {
        Ok(report) => {
            if !report_json_out.is_null() {
                let summary = serde_json::json!({
                    "epochs": report.epoch_stats,
                    "density_events": report.density_events,
                    "total_seconds": report.total_seconds,
                });
                *report_json_out = leak_string(summary.to_string());
            }
            *out = Box::into_raw(Box::new(SsCloud {
                inner: report.final_cloud,
            }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Renders one slice plane. `pose6` is `[rx, ry, rz, tx, ty, tz]` (radians;
/// translation applied before rotation), `extent` is `[ax, bx, ay, by]`,
/// `cutoff_chi2 <= 0` selects exact mode. `buf` receives width*height
/// doubles, row-major.
///
/// # Safety
/// `cloud` must be a live handle; `pose6`/`extent` must point to 6 and 4
/// doubles; `buf` must hold `buf_len >= width*height` doubles.
#[no_mangle]
pub unsafe extern "C" fn ss_render_slice(
    cloud: *const SsCloud,
    pose6: *const f64,
    width: usize,
    height: usize,
    extent: *const f64,
    cutoff_chi2: f64,
    buf: *mut f64,
    buf_len: usize,
) -> SsStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if pose6.is_null() {
        return fail_null("pose6");
    }
    if extent.is_null() {
        return fail_null("extent");
    }
    if buf.is_null() {
        return fail_null("buf");
    }
    if buf_len < width * height {
        set_error(&format!(
            "buffer holds {buf_len} doubles, need {}",
            width * height
        ));
        return SsStatus::InvalidArgument;
    }
    let p = std::slice::from_raw_parts(pose6, 6);
    let e = std::slice::from_raw_parts(extent, 4);
    let run = || -> Result<Vec<f64>, Error> {
        let pose = pose_from_6d(&Pose6D::new([p[0], p[1], p[2]], [p[3], p[4], p[5]]))?;
        let grid = PixelGridSpec {
            width,
            height,
            extent: [e[0], e[1], e[2], e[3]],
        };
        let opts = if cutoff_chi2 > 0.0 {
            RenderOptions::with_cutoff(cutoff_chi2)
        } else {
            RenderOptions::exact()
        };
        render_slice(&(*cloud).inner, &pose, &grid, &opts)
    };
    match run() {
        Ok(img) => {
            ptr::copy_nonoverlapping(img.as_ptr(), buf, img.len());
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Scores a cloud against a stack; returns a JSON document with per-slice
/// and mean metrics (release with [`ss_string_free`]).
///
/// # Safety
/// `cloud` and `stack` must be live handles; `json_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_evaluate(
    cloud: *const SsCloud,
    stack: *const SsStack,
    json_out: *mut *mut c_char,
) -> SsStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if stack.is_null() {
        return fail_null("stack");
    }
    if json_out.is_null() {
        return fail_null("json_out");
    }
    match evaluate(&(*cloud).inner, &(*stack).inner, &RenderOptions::exact()) {
        Ok(report) => {
            *json_out = leak_string(serde_json::to_string(&report).unwrap_or_default());
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

/// Samples the cloud onto a dense grid over `[min3, max3]`.
///
/// # Safety
/// `cloud` must be a live handle; `min3`/`max3` must point to 3 doubles;
/// `res3` to 3 usizes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ss_export_volume(
    cloud: *const SsCloud,
    min3: *const f64,
    max3: *const f64,
    res3: *const usize,
    out: *mut *mut SsVolume,
) -> SsStatus {
    if cloud.is_null() {
        return fail_null("cloud");
    }
    if min3.is_null() || max3.is_null() || res3.is_null() {
        return fail_null("bounds/resolution");
    }
    if out.is_null() {
        return fail_null("out");
    }
    let lo = std::slice::from_raw_parts(min3, 3);
    let hi = std::slice::from_raw_parts(max3, 3);
    let res = std::slice::from_raw_parts(res3, 3);
    match io::export_volume(
        &(*cloud).inner,
        ([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]]),
        [res[0], res[1], res[2]],
    ) {
        Ok(vol) => {
            *out = Box::into_raw(Box::new(SsVolume { inner: vol }));
            SsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `vol` must be null or a live handle; double frees are undefined.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_free(vol: *mut SsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Writes the volume's dimensions into `dim3`.
///
/// # Safety
/// `vol` must be a live handle; `dim3` must point to 3 usizes.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_dim(vol: *const SsVolume, dim3: *mut usize) -> SsStatus {
    if vol.is_null() {
        return fail_null("vol");
    }
    if dim3.is_null() {
        return fail_null("dim3");
    }
    for k in 0..3 {
        *dim3.add(k) = (*vol).inner.dim[k];
    }
    SsStatus::Ok
}

/// Copies the volume's voxels (f32, x fastest) into `buf`.
///
/// # Safety
/// `vol` must be a live handle; `buf` must hold `buf_len` floats.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_data(
    vol: *const SsVolume,
    buf: *mut f32,
    buf_len: usize,
) -> SsStatus {
    if vol.is_null() {
        return fail_null("vol");
    }
    if buf.is_null() {
        return fail_null("buf");
    }
    let data = &(*vol).inner.data;
    if buf_len < data.len() {
        set_error(&format!("buffer holds {buf_len} floats, need {}", data.len()));
        return SsStatus::InvalidArgument;
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    SsStatus::Ok
}

/// Saves the volume in the binary grid format.
///
/// # Safety
/// `vol` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_save(vol: *const SsVolume, path: *const c_char) -> SsStatus {
    if vol.is_null() {
        return fail_null("vol");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match io::save_volume(Path::new(path), &(*vol).inner) {
        Ok(()) => SsStatus::Ok,
        Err(e) => fail(e),
    }
}
