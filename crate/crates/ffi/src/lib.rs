//! C ABI over `strokeseg`. Volumes and models cross the boundary as opaque handles;
//! every call returns an [`SsStatus`] and leaves a message for
//! [`ss_last_error_message`] when it fails.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use strokeseg::checkpoint::read_checkpoint;
use strokeseg::metrics::dice_coefficient;
use strokeseg::ninepath::{Aggregation, NinePathModel};
use strokeseg::phantom::{gen_phantom, PhantomSpec};
use strokeseg::volume::{read_volume, write_volume_as, DType, Modality, Volume};
use strokeseg::Error;

/// Result of every call. Codes 1 to 3 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Numeric = 3,
    NullPointer = 10,
    InvalidArgument = 11,
    Panic = 12,
}

/// Values for the `aggregation` argument of [`ss_model_predict`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsAggregation {
    Cnn = 0,
    Majority = 1,
    Union = 2,
}

/// A 3D scalar grid, x fastest.
pub struct SsVolume(Volume);

/// A trained nine-path model with its post-processor.
pub struct SsModel(NinePathModel);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    LAST_ERROR.with(|e| *e.borrow_mut() = bytes);
}

fn clear_error() {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
}

struct Failure(SsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            1 => SsStatus::Config,
            3 => SsStatus::Numeric,
            _ => SsStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SsStatus::InvalidArgument, msg.into())
}

/// Run `f`, catching panics, recording the error message and mapping to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn volume_ref<'a>(v: *const SsVolume, what: &str) -> Result<&'a Volume, Failure> {
    v.as_ref().map(|v| &v.0).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

unsafe fn dims_arg(dims: *const usize) -> Result<[usize; 3], Failure> {
    if dims.is_null() {
        return Err(null("dims"));
    }
    let d = std::slice::from_raw_parts(dims, 3);
    Ok([d[0], d[1], d[2]])
}

/// Copy the last error message of this thread into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Version string of the library, static and NUL-terminated.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Read an MVOL1 file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_read(path: *const c_char, out: *mut *mut SsVolume) -> SsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, SsVolume(read_volume(path)?));
        Ok(())
    })
}

/// Write a volume as MVOL1. Masks are stored as bytes, everything else as f32.
///
/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_write(vol: *const SsVolume, path: *const c_char) -> SsStatus {
    guard(|| {
        let v = volume_ref(vol, "vol")?;
        let path = path_arg(path, "path")?;
        let dtype = if v.modality() == Modality::Mask { DType::U8 } else { DType::F32 };
        write_volume_as(v, path, dtype)?;
        Ok(())
    })
}

/// Build a volume from `len = dx*dy*dz` values. `modality`: 0 T1, 1 FLAIR, 2 mask, 3 map.
///
/// # Safety
/// `dims` and `voxel_mm` point to 3 values, `data` to `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_new(
    dims: *const usize,
    voxel_mm: *const f32,
    modality: u8,
    data: *const f32,
    len: usize,
    out: *mut *mut SsVolume,
) -> SsStatus {
    guard(|| {
        let dims = dims_arg(dims)?;
        if voxel_mm.is_null() {
            return Err(null("voxel_mm"));
        }
        if data.is_null() || out.is_null() {
            return Err(null(if data.is_null() { "data" } else { "out" }));
        }
        let mm = std::slice::from_raw_parts(voxel_mm, 3);
        let m = Modality::from_code(modality).ok_or_else(|| invalid(format!("unknown modality {modality}")))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        put(out, SsVolume(Volume::new(dims, [mm[0], mm[1], mm[2]], m, values)?));
        Ok(())
    })
}

/// Store the grid size in `out_dims[0..3]` as (x, y, z).
///
/// # Safety
/// `vol` must be a live handle; `out_dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_dims(vol: *const SsVolume, out_dims: *mut usize) -> SsStatus {
    guard(|| {
        let v = volume_ref(vol, "vol")?;
        if out_dims.is_null() {
            return Err(null("out_dims"));
        }
        std::slice::from_raw_parts_mut(out_dims, 3).copy_from_slice(&v.dims());
        Ok(())
    })
}

/// Borrowed pointer to the voxel values, valid until the handle is freed; null for a
/// null handle. `out_len` receives the value count when not null.
///
/// # Safety
/// `vol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_data(vol: *const SsVolume, out_len: *mut usize) -> *const f32 {
    match vol.as_ref() {
        Some(v) => {
            if !out_len.is_null() {
                *out_len = v.0.len();
            }
            v.0.data().as_ptr()
        }
        None => std::ptr::null(),
    }
}

/// # Safety
/// `vol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_volume_free(vol: *mut SsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Synthetic phantom: T1, FLAIR and truth mask on a `dims` grid.
///
/// # Safety
/// `dims` points to 3 values; the three out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn ss_phantom_generate(
    dims: *const usize,
    seed: u64,
    out_t1: *mut *mut SsVolume,
    out_flair: *mut *mut SsVolume,
    out_truth: *mut *mut SsVolume,
) -> SsStatus {
    guard(|| {
        let dims = dims_arg(dims)?;
        if out_t1.is_null() || out_flair.is_null() || out_truth.is_null() {
            return Err(null("output handle"));
        }
        let p = gen_phantom(&PhantomSpec::new(dims, seed))?;
        put(out_t1, SsVolume(p.t1));
        put(out_flair, SsVolume(p.flair));
        put(out_truth, SsVolume(p.truth));
        Ok(())
    })
}

/// Load a model checkpoint written by `strokeseg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, SsModel(NinePathModel::from_checkpoint(&read_checkpoint(path)?)?));
        Ok(())
    })
}

/// Segment `t1` with an [`SsAggregation`] value. `secondary` may be null unless the
/// model was trained bimodal.
///
/// # Safety
/// `model` and `t1` must be live handles, `secondary` null or live, `out_mask` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_predict(
    model: *const SsModel,
    t1: *const SsVolume,
    secondary: *const SsVolume,
    aggregation: u32,
    out_mask: *mut *mut SsVolume,
) -> SsStatus {
    guard(|| {
        let m = model.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))?;
        let t1 = volume_ref(t1, "t1")?;
        let second = secondary.as_ref().map(|v| &v.0);
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let agg = match aggregation {
            x if x == SsAggregation::Cnn as u32 => Aggregation::Cnn,
            x if x == SsAggregation::Majority as u32 => Aggregation::Majority,
            x if x == SsAggregation::Union as u32 => Aggregation::Union,
            x => return Err(invalid(format!("unknown aggregation {x}"))),
        };
        put(out_mask, SsVolume(m.predict(t1, second, agg, false)?.mask));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dice coefficient of two masks on the same grid; 1 when both are empty.
///
/// # Safety
/// `pred` and `truth` must be live handles; `out_dice` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_dice(pred: *const SsVolume, truth: *const SsVolume, out_dice: *mut f64) -> SsStatus {
    guard(|| {
        let (p, t) = (volume_ref(pred, "pred")?, volume_ref(truth, "truth")?);
        if out_dice.is_null() {
            return Err(null("out_dice"));
        }
        *out_dice = dice_coefficient("", p, t)?.dice;
        Ok(())
    })
}
