//! C ABI over the `rego` library.
//!
//! Models and indexes are exposed as opaque heap handles created by
//! `*_load` and released by `*_free`. Every fallible function returns a
//! [`RegoStatus`]; on failure the message is available from
//! [`rego_last_error_message`] on the same thread until the next failing call.
//! Panics never cross the boundary: they are caught and reported as
//! [`RegoStatus::Panic`].
//!
//! Images are passed as tightly packed 8-bit buffers in row-major order:
//! RGB (`H·W·3` bytes) for colour images and one byte per pixel for sketches,
//! where values `>= 128` mark strokes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rego::generator::outpaint;
use rego::imageio::Sketch;
use rego::service::{IndexBundle, LoadedModel};
use rego::tensor::Tensor;
use rego::RegoError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Shape = 4,
    Config = 5,
    NotFound = 6,
    InvalidValue = 7,
    Checkpoint = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// A loaded checkpoint. Opaque to C.
pub struct RegoModel {
    inner: LoadedModel,
}

/// A loaded reference index. Opaque to C.
pub struct RegoIndex {
    inner: IndexBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RegoStatus, String);

impl From<RegoError> for Failure {
    fn from(e: RegoError) -> Self {
        let status = match &e {
            RegoError::Io { .. } | RegoError::Image(_) | RegoError::Json(_) => RegoStatus::Io,
            RegoError::Shape(_) => RegoStatus::Shape,
            RegoError::Config(_) => RegoStatus::Config,
            RegoError::NotFound(_) => RegoStatus::NotFound,
            RegoError::InvalidValue(_) | RegoError::DegenerateEmbedding(_) => RegoStatus::InvalidValue,
            RegoError::Checkpoint(_) => RegoStatus::Checkpoint,
            _ => RegoStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: RegoStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RegoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RegoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RegoStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(fail(RegoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(RegoStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(RegoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RegoStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, expected: usize, what: &str) -> Result<&'a [u8], Failure> {
    if p.is_null() {
        return Err(fail(RegoStatus::NullPointer, format!("{what} is null")));
    }
    if len != expected {
        return Err(fail(RegoStatus::Shape, format!("{what} has {len} bytes, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn rgb_tensor(bytes: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| bytes[(y * w + x) * 3 + c] as f64 / 255.0)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rego_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, or null if none occurred.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rego_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rego_model_load(path: *const c_char, out: *mut *mut RegoModel) -> RegoStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(RegoStatus::NullPointer, "out is null"));
        }
        let path = path_arg(path, "path")?;
        let inner = LoadedModel::load(path)?;
        *out = Box::into_raw(Box::new(RegoModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`rego_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rego_model_free(model: *mut RegoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Full-image height and width the model was trained for.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn rego_model_resolution(
    model: *const RegoModel,
    height: *mut u32,
    width: *mut u32,
) -> RegoStatus {
    guard(|| {
        if model.is_null() || height.is_null() || width.is_null() {
            return Err(fail(RegoStatus::NullPointer, "null argument"));
        }
        let (h, w) = (*model).inner.resolution();
        *height = h as u32;
        *width = w as u32;
        Ok(())
    })
}

/// Outpaints an `H × W/2` RGB left half into an `H × W` RGB composite whose
/// left half is the input. `sketch` (`H·W/2` bytes) and `reference`
/// (`H·W/2·3` bytes, a right half) may be null: a null sketch selects random
/// outpainting and a null reference means no guidance.
///
/// # Safety
/// Non-null buffers must be valid for their stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rego_model_outpaint(
    model: *const RegoModel,
    left_rgb: *const u8,
    left_len: usize,
    sketch: *const u8,
    sketch_len: usize,
    reference_rgb: *const u8,
    reference_len: usize,
    out_rgb: *mut u8,
    out_len: usize,
) -> RegoStatus {
    guard(|| {
        if model.is_null() || out_rgb.is_null() {
            return Err(fail(RegoStatus::NullPointer, "model or output buffer is null"));
        }
        let m = &(*model).inner;
        let (h, w) = m.resolution();
        let half = w / 2;
        if out_len < h * w * 3 {
            return Err(fail(
                RegoStatus::BufferTooSmall,
                format!("output buffer has {out_len} bytes, needs {}", h * w * 3),
            ));
        }
        let left = rgb_tensor(bytes_arg(left_rgb, left_len, h * half * 3, "left_rgb")?, h, half);
        let sketch = if sketch.is_null() {
            None
        } else {
            let bytes = bytes_arg(sketch, sketch_len, h * half, "sketch")?;
            let mask = Tensor::from_fn([1, 1, h, half], |_, _, y, x| f64::from(u8::from(bytes[y * half + x] >= 128)));
            Some(Sketch::new(mask)?)
        };
        let reference = if reference_rgb.is_null() {
            None
        } else {
            Some(rgb_tensor(bytes_arg(reference_rgb, reference_len, h * half * 3, "reference_rgb")?, h, half))
        };
        let result = outpaint(&m.generator, &m.checkpoint.params, &left, sketch.as_ref(), reference.as_ref())?;
        let out = std::slice::from_raw_parts_mut(out_rgb, h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = result.composite.at(0, c, y, x);
                    out[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Ok(())
    })
}

/// Loads `index.json` (and any `images/` beside it) into a new index handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rego_index_load(path: *const c_char, out: *mut *mut RegoIndex) -> RegoStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(RegoStatus::NullPointer, "out is null"));
        }
        let inner = IndexBundle::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(RegoIndex { inner }));
        Ok(())
    })
}

/// Releases an index handle. Null is ignored.
///
/// # Safety
/// `index` must come from [`rego_index_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rego_index_free(index: *mut RegoIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of indexed images.
///
/// # Safety
/// `index` must be a live handle and `len` writable.
#[no_mangle]
pub unsafe extern "C" fn rego_index_len(index: *const RegoIndex, len: *mut usize) -> RegoStatus {
    guard(|| {
        if index.is_null() || len.is_null() {
            return Err(fail(RegoStatus::NullPointer, "null argument"));
        }
        *len = (*index).inner.index.len();
        Ok(())
    })
}

/// The `k` nearest other images of the indexed image `id`, most similar
/// first, as positions (see [`rego_index_id`]) and cosine similarities.
///
/// # Safety
/// `id` must be NUL-terminated; both output arrays must hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn rego_index_neighbors(
    index: *const RegoIndex,
    id: *const c_char,
    k: usize,
    out_positions: *mut usize,
    out_similarities: *mut f64,
) -> RegoStatus {
    guard(|| {
        if index.is_null() || out_positions.is_null() || out_similarities.is_null() {
            return Err(fail(RegoStatus::NullPointer, "null argument"));
        }
        let ix = &(*index).inner.index;
        let ranked = ix.query_neighbors(str_arg(id, "id")?, k)?;
        let positions = std::slice::from_raw_parts_mut(out_positions, k);
        let sims = std::slice::from_raw_parts_mut(out_similarities, k);
        for (i, (nid, s)) in ranked.iter().enumerate() {
            positions[i] = ix.ids().iter().position(|x| x == nid).expect("ranked ids are indexed");
            sims[i] = *s;
        }
        Ok(())
    })
}

/// Copies the id at `position` into `buf` as a NUL-terminated string.
///
/// # Safety
/// `buf` must be writable for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rego_index_id(
    index: *const RegoIndex,
    position: usize,
    buf: *mut c_char,
    buf_len: usize,
) -> RegoStatus {
    guard(|| {
        if index.is_null() || buf.is_null() {
            return Err(fail(RegoStatus::NullPointer, "null argument"));
        }
        let ids = (*index).inner.index.ids();
        let id = ids
            .get(position)
            .ok_or_else(|| fail(RegoStatus::NotFound, format!("position {position} outside index of {}", ids.len())))?;
        if id.len() + 1 > buf_len {
            return Err(fail(
                RegoStatus::BufferTooSmall,
                format!("id needs {} bytes, buffer has {buf_len}", id.len() + 1),
            ));
        }
        let out = std::slice::from_raw_parts_mut(buf as *mut u8, id.len() + 1);
        out[..id.len()].copy_from_slice(id.as_bytes());
        out[id.len()] = 0;
        Ok(())
    })
}
