//! C ABI over `deformreg`.
//!
//! Objects cross the boundary as opaque heap handles that the caller frees
//! with the matching `dr_*_free`. Every entry point returns a [`DrStatus`];
//! on failure a description is available from [`dr_last_error_message`] on
//! the same thread. Panics never unwind into C: they are reported as
//! [`DrStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deformreg::{
    dice, hd95, ndv, register, synthetic_pair, warp, warp_labels, DispField, Error, Grid, InterpMode, LabelMap,
    PhantomKind, RegConfig, Volume3,
};

/// Outcome of an FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    GridMismatch = 5,
    Numerical = 6,
    Panic = 7,
}

/// Scalar image.
pub struct DrVolume(Volume3);

/// Integer label map.
pub struct DrLabelMap(LabelMap);

/// Displacement field in voxel units.
pub struct DrField(DispField);

/// Registration settings.
pub struct DrConfig(RegConfig);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Image(_) => DrStatus::Io,
            Error::Nifti { .. } | Error::Parse { .. } => DrStatus::Format,
            Error::GridMismatch(_) => DrStatus::GridMismatch,
            Error::InvalidDims(_) | Error::InvalidParameter(_) => DrStatus::InvalidArgument,
            Error::NonFinite(_) | Error::Diverged { .. } => DrStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            DrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DrStatus::InvalidArgument, msg.into())
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = as_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn drop_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

unsafe fn write_dims(grid: &Grid, dims: *mut usize) -> Result<(), Failure> {
    if dims.is_null() {
        return Err(null("dims"));
    }
    ptr::copy_nonoverlapping(grid.dims.as_ptr(), dims, 3);
    Ok(())
}

unsafe fn read3<T: Copy>(p: *const T, what: &str) -> Result<[T; 3], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok([*p, *p.add(1), *p.add(2)])
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn dr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a 3D NIfTI image (`.nii` or `.nii.gz`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_load(path: *const c_char, out: *mut *mut DrVolume) -> DrStatus {
    guard(|| put(out, DrVolume(deformreg::load_volume(path_arg(path)?)?)))
}

/// Creates a volume by copying `nx*ny*nz` x-fastest floats.
///
/// # Safety
/// `dims` and `spacing` must point to three values, `data` to the voxels.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_from_data(
    dims: *const usize,
    spacing: *const f64,
    data: *const f32,
    out: *mut *mut DrVolume,
) -> DrStatus {
    guard(|| {
        let dims = read3(dims, "dims")?;
        let grid = Grid::new(dims, read3(spacing, "spacing")?, [0.0; 3])?;
        if data.is_null() {
            return Err(null("data"));
        }
        let values = std::slice::from_raw_parts(data, grid.len()).to_vec();
        put(out, DrVolume(Volume3::new(grid, values)?))
    })
}

/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_save(vol: *const DrVolume, path: *const c_char) -> DrStatus {
    guard(|| Ok(deformreg::save_volume(&as_ref(vol, "volume")?.0, path_arg(path)?)?))
}

/// Writes the grid size into `dims[0..3]`.
///
/// # Safety
/// `vol` must be a live handle and `dims` writable for three values.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_dims(vol: *const DrVolume, dims: *mut usize) -> DrStatus {
    guard(|| write_dims(as_ref(vol, "volume")?.0.grid(), dims))
}

/// Borrowed pointer to the x-fastest voxel values, valid while `vol` lives.
/// Returns null for a null handle.
///
/// # Safety
/// `vol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_data(vol: *const DrVolume) -> *const f32 {
    vol.as_ref().map_or(ptr::null(), |v| v.0.data().as_ptr())
}

/// # Safety
/// `vol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dr_volume_free(vol: *mut DrVolume) {
    drop_handle(vol);
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_labels_load(path: *const c_char, out: *mut *mut DrLabelMap) -> DrStatus {
    guard(|| put(out, DrLabelMap(deformreg::load_labels(path_arg(path)?)?)))
}

/// # Safety
/// `labels` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dr_labels_save(labels: *const DrLabelMap, path: *const c_char) -> DrStatus {
    guard(|| Ok(deformreg::save_labels(&as_ref(labels, "labels")?.0, path_arg(path)?)?))
}

/// # Safety
/// `labels` must be a live handle and `dims` writable for three values.
#[no_mangle]
pub unsafe extern "C" fn dr_labels_dims(labels: *const DrLabelMap, dims: *mut usize) -> DrStatus {
    guard(|| write_dims(as_ref(labels, "labels")?.0.grid(), dims))
}

/// Borrowed pointer to the x-fastest labels, valid while `labels` lives.
///
/// # Safety
/// `labels` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_labels_data(labels: *const DrLabelMap) -> *const u32 {
    labels.as_ref().map_or(ptr::null(), |l| l.0.data().as_ptr())
}

/// # Safety
/// `labels` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dr_labels_free(labels: *mut DrLabelMap) {
    drop_handle(labels);
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_field_load(path: *const c_char, out: *mut *mut DrField) -> DrStatus {
    guard(|| put(out, DrField(deformreg::load_field(path_arg(path)?)?)))
}

/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dr_field_save(field: *const DrField, path: *const c_char) -> DrStatus {
    guard(|| Ok(deformreg::save_field(&as_ref(field, "field")?.0, path_arg(path)?)?))
}

/// # Safety
/// `field` must be a live handle and `dims` writable for three values.
#[no_mangle]
pub unsafe extern "C" fn dr_field_dims(field: *const DrField, dims: *mut usize) -> DrStatus {
    guard(|| write_dims(as_ref(field, "field")?.0.grid(), dims))
}

/// Borrowed pointer to component `axis` (0 = x, 1 = y, 2 = z), x-fastest,
/// valid while `field` lives. Null for a null handle or a bad axis.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_field_component(field: *const DrField, axis: usize) -> *const f32 {
    match field.as_ref() {
        Some(f) if axis < 3 => f.0.component(axis).as_ptr(),
        _ => ptr::null(),
    }
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dr_field_free(field: *mut DrField) {
    drop_handle(field);
}

/// Default registration settings.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_config_new(out: *mut *mut DrConfig) -> DrStatus {
    guard(|| put(out, DrConfig(RegConfig::default())))
}

/// Reads settings from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_config_load(path: *const c_char, out: *mut *mut DrConfig) -> DrStatus {
    guard(|| put(out, DrConfig(RegConfig::load(path_arg(path)?)?)))
}

/// Sets the similarity and smoothness weights.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_config_set_weights(cfg: *mut DrConfig, lambda0: f64, lambda1: f64) -> DrStatus {
    guard(|| {
        let c = &mut as_mut(cfg, "config")?.0;
        let mut next = c.clone();
        next.lambda0 = lambda0;
        next.lambda1 = lambda1;
        next.validate()?;
        *c = next;
        Ok(())
    })
}

/// Sets the per-voxel Adam step size.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_config_set_field_learning_rate(cfg: *mut DrConfig, lr: f64) -> DrStatus {
    guard(|| {
        let c = &mut as_mut(cfg, "config")?.0;
        let mut next = c.clone();
        next.field_learning_rate = lr;
        next.validate()?;
        *c = next;
        Ok(())
    })
}

/// Replaces the coarse-to-fine schedule with `count` levels given as
/// downsampling factors and iteration counts, coarsest first.
///
/// # Safety
/// `cfg` must be a live handle; `factors` and `iterations` must hold
/// `count` values each.
#[no_mangle]
pub unsafe extern "C" fn dr_config_set_levels(
    cfg: *mut DrConfig,
    factors: *const usize,
    iterations: *const usize,
    count: usize,
) -> DrStatus {
    guard(|| {
        let c = &mut as_mut(cfg, "config")?.0;
        if factors.is_null() || iterations.is_null() {
            return Err(null("level arrays"));
        }
        let f = std::slice::from_raw_parts(factors, count);
        let it = std::slice::from_raw_parts(iterations, count);
        let mut next = c.clone();
        next.levels = f.iter().copied().zip(it.iter().copied()).collect();
        next.validate()?;
        *c = next;
        Ok(())
    })
}

/// Turns the final bilateral refinement on (non-zero) or off (zero).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dr_config_set_bilateral(cfg: *mut DrConfig, enabled: i32) -> DrStatus {
    guard(|| {
        as_mut(cfg, "config")?.0.bf_enabled = enabled != 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dr_config_free(cfg: *mut DrConfig) {
    drop_handle(cfg);
}

/// Registers `moving` onto `fixed`; the result lives on the fixed grid.
/// A null `cfg` uses the defaults.
///
/// # Safety
/// Handles must be live (or `cfg` null) and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_register(
    moving: *const DrVolume,
    fixed: *const DrVolume,
    cfg: *const DrConfig,
    out: *mut *mut DrField,
) -> DrStatus {
    guard(|| {
        let (m, f) = (as_ref(moving, "moving")?, as_ref(fixed, "fixed")?);
        let default = RegConfig::default();
        let c = cfg.as_ref().map_or(&default, |c| &c.0);
        let (u, _) = register(&m.0, &f.0, c)?;
        put(out, DrField(u))
    })
}

/// Trilinear resampling of `vol` through `field`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_warp(vol: *const DrVolume, field: *const DrField, out: *mut *mut DrVolume) -> DrStatus {
    guard(|| {
        let w = warp(&as_ref(vol, "volume")?.0, &as_ref(field, "field")?.0, InterpMode::Linear)?;
        put(out, DrVolume(w))
    })
}

/// Nearest-neighbour resampling of `labels` through `field`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_warp_labels(
    labels: *const DrLabelMap,
    field: *const DrField,
    out: *mut *mut DrLabelMap,
) -> DrStatus {
    guard(|| {
        let w = warp_labels(&as_ref(labels, "labels")?.0, &as_ref(field, "field")?.0)?;
        put(out, DrLabelMap(w))
    })
}

/// Percentage of folded volume of the field.
///
/// # Safety
/// `field` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_field_ndv(field: *const DrField, out: *mut f64) -> DrStatus {
    guard(|| {
        let v = ndv(&as_ref(field, "field")?.0)?;
        *as_mut(out, "out")? = v;
        Ok(())
    })
}

/// Mean Dice over the union of foreground labels.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_dice_mean(a: *const DrLabelMap, b: *const DrLabelMap, out: *mut f64) -> DrStatus {
    guard(|| {
        let d = dice(&as_ref(a, "labels a")?.0, &as_ref(b, "labels b")?.0)?;
        *as_mut(out, "out")? = d.mean;
        Ok(())
    })
}

/// Mean 95th-percentile Hausdorff distance in mm over labels present in
/// both maps. Writes NaN when no label could be scored.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dr_hd95_mean(a: *const DrLabelMap, b: *const DrLabelMap, out: *mut f64) -> DrStatus {
    guard(|| {
        let h = hd95(&as_ref(a, "labels a")?.0, &as_ref(b, "labels b")?.0)?;
        *as_mut(out, "out")? = h.mean.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Synthetic pair with a known answer: registering `moving` onto `fixed`
/// should recover `truth`. `kind` is 0 for spheres, 1 for blobs. Output
/// handles that are null are skipped.
///
/// # Safety
/// `dims` must hold three values; each non-null output must be writable.
#[no_mangle]
pub unsafe extern "C" fn dr_synthetic_pair(
    kind: i32,
    dims: *const usize,
    max_disp: f64,
    seed: u64,
    moving: *mut *mut DrVolume,
    fixed: *mut *mut DrVolume,
    moving_labels: *mut *mut DrLabelMap,
    fixed_labels: *mut *mut DrLabelMap,
    truth: *mut *mut DrField,
) -> DrStatus {
    guard(|| {
        let kind = match kind {
            0 => PhantomKind::Spheres,
            1 => PhantomKind::Blobs,
            k => return Err(invalid(format!("phantom kind must be 0 or 1, got {k}"))),
        };
        let p = synthetic_pair(kind, read3(dims, "dims")?, max_disp, seed)?;
        if !moving.is_null() {
            put(moving, DrVolume(p.moving))?;
        }
        if !fixed.is_null() {
            put(fixed, DrVolume(p.fixed))?;
        }
        if !moving_labels.is_null() {
            put(moving_labels, DrLabelMap(p.moving_labels))?;
        }
        if !fixed_labels.is_null() {
            put(fixed_labels, DrLabelMap(p.fixed_labels))?;
        }
        if !truth.is_null() {
            put(truth, DrField(p.truth))?;
        }
        Ok(())
    })
}
