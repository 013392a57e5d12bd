//! C ABI over the `piip` crate.
//!
//! Models are opaque [`PiipModel`] handles created by one of the
//! `piip_model_*` constructors and released with [`piip_model_free`]. Every
//! fallible call returns a [`PiipStatus`]; on failure the message is kept per
//! thread and can be copied out with [`piip_last_error_message`]. Images are
//! `f32` planar `[3, H, W]` buffers. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use piip::config::{preset, ConfigFile};
use piip::numerics::Tensor;
use piip::{checkpoint, count_macs, Error, Model};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiipStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument at the boundary: non-UTF-8 string, wrong buffer length.
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    Integrity = 6,
    UnsupportedVersion = 7,
    Io = 8,
    Input = 9,
    Internal = 10,
    Panic = 11,
}

/// Opaque model handle.
pub struct PiipModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PiipStatus {
    match e {
        Error::Config(_) | Error::Parse(_) | Error::Schedule(_) => PiipStatus::Config,
        Error::Shape(_) | Error::Dimension(_) => PiipStatus::Shape,
        Error::Numeric(_) => PiipStatus::Numeric,
        Error::Integrity(_) => PiipStatus::Integrity,
        Error::UnsupportedVersion { .. } => PiipStatus::UnsupportedVersion,
        Error::Io(_) | Error::Csv(_) => PiipStatus::Io,
        Error::Input(_) => PiipStatus::Input,
        Error::Contract(_) => PiipStatus::Internal,
    }
}

/// Failure raised at the boundary itself.
struct Boundary(PiipStatus, String);

impl From<Error> for Boundary {
    fn from(e: Error) -> Self {
        Boundary(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Boundary>) -> PiipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PiipStatus::Ok
        }
        Ok(Err(Boundary(status, msg))) => {
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
            PiipStatus::Panic
        }
    }
}

fn null(what: &str) -> Boundary {
    Boundary(PiipStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Boundary> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Boundary(PiipStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model<'a>(p: *const PiipModel) -> Result<&'a PiipModel, Boundary> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn emit(out: *mut *mut PiipModel, model: Model<f32>) -> Result<(), Boundary> {
    *out = Box::into_raw(Box::new(PiipModel { inner: model }));
    Ok(())
}

unsafe fn out_slot(out: *mut *mut PiipModel) -> Result<(), Boundary> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = ptr::null_mut();
    Ok(())
}

/// Builds a built-in preset with random initialization.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_model_from_preset(name: *const c_char, seed: u64, out: *mut *mut PiipModel) -> PiipStatus {
    guard(|| {
        out_slot(out)?;
        let cfg = preset(text(name, "name")?)?;
        emit(out, Model::build(&cfg, seed)?)
    })
}

/// Builds the model described by a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_model_from_config_file(path: *const c_char, seed: u64, out: *mut *mut PiipModel) -> PiipStatus {
    guard(|| {
        out_slot(out)?;
        let file = ConfigFile::load(PathBuf::from(text(path, "path")?))?;
        emit(out, Model::build(&file.model, seed)?)
    })
}

/// Loads a checkpoint, rebuilding the model from its config snapshot.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_model_load(path: *const c_char, out: *mut *mut PiipModel) -> PiipStatus {
    guard(|| {
        out_slot(out)?;
        emit(out, checkpoint::load(text(path, "path")?)?)
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must come from a `piip_model_*` constructor; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn piip_model_save(model: *const PiipModel, path: *const c_char) -> PiipStatus {
    guard(|| {
        let m = self::model(model)?;
        checkpoint::save(&m.inner, text(path, "path")?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a `piip_model_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn piip_model_free(model: *mut PiipModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the expected image shape `[3, H, W]` to `out[0..3]`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn piip_model_input_shape(model: *const PiipModel, out: *mut usize) -> PiipStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = m.inner.input_shape();
        ptr::copy_nonoverlapping(shape.as_ptr(), out, 3);
        Ok(())
    })
}

/// Number of `f32` values one forward writes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_model_output_len(model: *const PiipModel, out: *mut usize) -> PiipStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.output_shape().iter().product();
        Ok(())
    })
}

/// Runs one image through the model.
///
/// `image` holds `3·H·W` values in the order given by
/// [`piip_model_input_shape`]; `out` receives
/// [`piip_model_output_len`] values: `[D_1, G, G]` for dense models,
/// class logits otherwise.
///
/// # Safety
/// `image` and `out` must point to `image_len` and `out_len` valid floats.
#[no_mangle]
pub unsafe extern "C" fn piip_model_forward(
    model: *const PiipModel,
    image: *const f32,
    image_len: usize,
    out: *mut f32,
    out_len: usize,
) -> PiipStatus {
    guard(|| {
        let m = self::model(model)?;
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = m.inner.input_shape();
        let want_in: usize = shape.iter().product();
        let want_out: usize = m.inner.output_shape().iter().product();
        if image_len != want_in || out_len != want_out {
            return Err(Boundary(
                PiipStatus::InvalidArgument,
                format!("buffers hold {image_len} and {out_len} values, the model needs {want_in} and {want_out}"),
            ));
        }
        let x = Tensor::new(shape.to_vec(), std::slice::from_raw_parts(image, image_len).to_vec())?;
        let y = m.inner.infer(&x)?;
        ptr::copy_nonoverlapping(y.data().as_ptr(), out, out_len);
        Ok(())
    })
}

/// Closed-form parameter and MAC totals of the model's architecture.
///
/// # Safety
/// `model` must be a live handle; `params` and `macs` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_model_cost(model: *const PiipModel, params: *mut u64, macs: *mut u64) -> PiipStatus {
    guard(|| {
        let m = self::model(model)?;
        if params.is_null() || macs.is_null() {
            return Err(null("params/macs"));
        }
        let r = count_macs(m.inner.config());
        *params = r.total_params();
        *macs = r.total_macs();
        Ok(())
    })
}

/// Closed-form totals of a preset without building it.
///
/// # Safety
/// `name` must be a NUL-terminated string; `params` and `macs` must be writable.
#[no_mangle]
pub unsafe extern "C" fn piip_preset_cost(name: *const c_char, params: *mut u64, macs: *mut u64) -> PiipStatus {
    guard(|| {
        if params.is_null() || macs.is_null() {
            return Err(null("params/macs"));
        }
        let r = count_macs(&preset(text(name, "name")?)?);
        *params = r.total_params();
        *macs = r.total_macs();
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns its full length
/// including the terminator. A call that succeeds clears the message.
///
/// # Safety
/// `buf` must hold `cap` bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn piip_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn piip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
