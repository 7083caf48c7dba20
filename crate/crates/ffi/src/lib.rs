//! C ABI over the codec.
//!
//! Every function returns a [`DcStatus`]. On failure a message is kept per
//! thread and can be read with [`dc_last_error`]. Buffers handed out by the
//! library must be released with the matching `dc_*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffcom::checkpoint::Checkpoint;
use diffcom::codec::{compress, decompress, CompressOptions};
use diffcom::geom::chamfer_distance;
use diffcom::model::Model;
use diffcom::{Error, PointCloud, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Parse = 3,
    ConfigMismatch = 4,
    CorruptStream = 5,
    InvalidArgument = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque loaded model.
pub struct DcModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Io(_) => DcStatus::Io,
        Error::Parse(_) | Error::Serde(_) => DcStatus::Parse,
        Error::ConfigMismatch(_) | Error::Shape(_) => DcStatus::ConfigMismatch,
        Error::Version(_)
        | Error::Truncated(_)
        | Error::Checksum { .. }
        | Error::CorruptStream(_)
        | Error::ZeroProbability { .. } => DcStatus::CorruptStream,
        Error::EmptyCloud | Error::NonFinite(_) | Error::InvalidArgument(_) => DcStatus::InvalidArgument,
        Error::Diverged { .. } => DcStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DcStatus, String)>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            DcStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DcStatus, String) {
    (DcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `xyz` must point to `3·n` readable doubles.
unsafe fn cloud_from(xyz: *const f64, n: usize) -> Result<PointCloud, (DcStatus, String)> {
    if xyz.is_null() {
        return Err(null("points"));
    }
    let data = std::slice::from_raw_parts(xyz, 3 * n).to_vec();
    PointCloud::new(Tensor::from_vec(n, 3, data)).map_err(lib_err)
}

fn leak_slice<T>(v: Vec<T>) -> (*mut T, usize) {
    let b = v.into_boxed_slice();
    let n = b.len();
    (Box::into_raw(b) as *mut T, n)
}

/// Message of the last failed call on this thread (empty if none). Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path).to_str().map_err(|_| (DcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = Checkpoint::load(Path::new(p)).and_then(|c| c.to_model()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DcModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`dc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of points the model works on.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dc_model_point_count(model: *const DcModel, out: *mut usize) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.cfg.points;
        Ok(())
    })
}

/// Compresses `n` points (`xyz`, row-major). `steps = 0` records the model's
/// default DDIM step count. The stream is returned in `out_bytes`/`out_len`
/// and must be released with [`dc_bytes_free`].
///
/// # Safety
/// `xyz` must hold `3·n` doubles; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dc_compress(
    model: *const DcModel,
    xyz: *const f64,
    n: usize,
    seed: u64,
    steps: u32,
    out_bytes: *mut *mut u8,
    out_len: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_bytes.is_null() || out_len.is_null() {
            return Err(null("output"));
        }
        *out_bytes = ptr::null_mut();
        *out_len = 0;
        let cloud = cloud_from(xyz, n)?;
        let opts = CompressOptions { steps: (steps > 0).then_some(steps as usize), seed };
        let enc = compress(&m.model, &cloud, &opts).map_err(lib_err)?;
        let (p, len) = leak_slice(enc.bytes);
        *out_bytes = p;
        *out_len = len;
        Ok(())
    })
}

/// Decompresses a stream. `steps = 0` uses the step count from the header.
/// Points are returned row-major (`3·out_n` doubles) and must be released
/// with [`dc_points_free`].
///
/// # Safety
/// `bytes` must hold `len` bytes; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dc_decompress(
    model: *const DcModel,
    bytes: *const u8,
    len: usize,
    steps: u32,
    out_xyz: *mut *mut f64,
    out_n: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        if out_xyz.is_null() || out_n.is_null() {
            return Err(null("output"));
        }
        *out_xyz = ptr::null_mut();
        *out_n = 0;
        let data = std::slice::from_raw_parts(bytes, len);
        let dec = decompress(&m.model, data, (steps > 0).then_some(steps as usize)).map_err(lib_err)?;
        let n = dec.cloud.len();
        let (p, _) = leak_slice(dec.cloud.into_points().data().to_vec());
        *out_xyz = p;
        *out_n = n;
        Ok(())
    })
}

/// Symmetric Chamfer distance (sum of mean squared nearest-neighbour distances).
///
/// # Safety
/// `a` and `b` must hold `3·na` and `3·nb` doubles.
#[no_mangle]
pub unsafe extern "C" fn dc_chamfer(a: *const f64, na: usize, b: *const f64, nb: usize, out: *mut f64) -> DcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let ca = cloud_from(a, na)?;
        let cb = cloud_from(b, nb)?;
        *out = chamfer_distance(&ca, &cb).map_err(lib_err)?;
        Ok(())
    })
}

/// # Safety
/// `p`/`len` must come from [`dc_compress`].
#[no_mangle]
pub unsafe extern "C" fn dc_bytes_free(p: *mut u8, len: usize) {
    if !p.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, len)));
    }
}

/// # Safety
/// `p`/`n` must come from [`dc_decompress`].
#[no_mangle]
pub unsafe extern "C" fn dc_points_free(p: *mut f64, n: usize) {
    if !p.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, 3 * n)));
    }
}
