//! C ABI over `ptq-core`.
//!
//! Functions return a [`PtqStatus`]; on failure the message is available from
//! [`ptq_last_error_message`] on the same thread. Archives are opaque
//! handles released with [`ptq_archive_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ptq_core::aciq;
use ptq_core::pipeline::{self, QuantPolicy};
use ptq_core::quant::{self, Bits, Method, Tensor};
use ptq_core::store::{self, Archive};
use ptq_core::PtqError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NotFound = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtqMethod {
    Lq = 0,
    Aciq = 1,
    OcsNaive = 2,
    OcsQa = 3,
}

impl From<PtqMethod> for Method {
    fn from(m: PtqMethod) -> Self {
        match m {
            PtqMethod::Lq => Method::Lq,
            PtqMethod::Aciq => Method::Aciq,
            PtqMethod::OcsNaive => Method::OcsNaive,
            PtqMethod::OcsQa => Method::OcsQa,
        }
    }
}

/// Opaque archive handle.
pub struct PtqArchive {
    inner: Archive,
    names: Vec<CString>,
}

impl PtqArchive {
    fn boxed(inner: Archive) -> *mut PtqArchive {
        let names = inner
            .records
            .iter()
            .map(|r| CString::new(r.name.as_str()).unwrap_or_default())
            .collect();
        Box::into_raw(Box::new(PtqArchive { inner, names }))
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &PtqError) -> PtqStatus {
    use PtqError::*;
    match e.root() {
        Io(_) => PtqStatus::Io,
        BadMagic(_) | UnsupportedVersion(_) | Truncated(_) | OverlappingExtents { .. }
        | InvalidUtf8(_) | UnknownDtype { .. } | DuplicateName(_) | InvalidName(_) | ShapeOverflow(_)
        | ElementCount { .. } | Metadata(_) | Json(_) => PtqStatus::Format,
        NotFound(_) => PtqStatus::NotFound,
        NonFinite { .. } | NoSignChange { .. } => PtqStatus::Numeric,
        _ => PtqStatus::InvalidArgument,
    }
}

struct Fail(PtqStatus, String);

impl From<PtqError> for Fail {
    fn from(e: PtqError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PtqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PtqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PtqStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PtqStatus::NullPointer, format!("{what} is null"))
}

unsafe fn archive_ref<'a>(a: *const PtqArchive) -> Result<&'a PtqArchive, Fail> {
    a.as_ref().ok_or_else(|| null("archive"))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(PtqStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn bits_arg(bits: u32) -> Result<Bits, Fail> {
    Ok(Bits::new(bits)?)
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ptq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn ptq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_read_file(path: *const c_char, out: *mut *mut PtqArchive) -> PtqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let a = store::read_archive_file(str_arg(path, "path")?)?;
        *out = PtqArchive::boxed(a);
        Ok(())
    })
}

/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_read_bytes(data: *const u8, len: usize, out: *mut *mut PtqArchive) -> PtqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let bytes = if len == 0 {
            &[][..]
        } else if data.is_null() {
            return Err(null("data"));
        } else {
            std::slice::from_raw_parts(data, len)
        };
        *out = PtqArchive::boxed(store::read_archive(bytes)?);
        Ok(())
    })
}

/// # Safety
/// `archive` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_write_file(archive: *const PtqArchive, path: *const c_char) -> PtqStatus {
    guard(|| {
        let a = archive_ref(archive)?;
        let bytes = store::write_archive(&a.inner)?;
        std::fs::write(str_arg(path, "path")?, bytes).map_err(PtqError::from)?;
        Ok(())
    })
}

/// # Safety
/// `archive` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_free(archive: *mut PtqArchive) {
    if !archive.is_null() {
        drop(Box::from_raw(archive));
    }
}

/// Number of tensors, or 0 for a null handle.
///
/// # Safety
/// `archive` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_tensor_count(archive: *const PtqArchive) -> usize {
    archive.as_ref().map_or(0, |a| a.inner.records.len())
}

/// Name of tensor `index`, owned by the handle; null when out of range.
///
/// # Safety
/// `archive` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_tensor_name(archive: *const PtqArchive, index: usize) -> *const c_char {
    archive
        .as_ref()
        .and_then(|a| a.names.get(index))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Copies a float32 tensor into `out` (capacity `cap` elements) and stores
/// its element count in `len`. With `out` null only `len` is written.
///
/// # Safety
/// `out` must have room for `cap` floats; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ptq_archive_tensor_f32(
    archive: *const PtqArchive,
    name: *const c_char,
    out: *mut f32,
    cap: usize,
    len: *mut usize,
) -> PtqStatus {
    guard(|| {
        let a = archive_ref(archive)?;
        let name = str_arg(name, "name")?;
        let len = out_arg(len, "len")?;
        let rec = a.inner.get(name)?;
        let data = rec.data.as_f32().ok_or_else(|| {
            Fail(
                PtqStatus::InvalidArgument,
                format!("tensor {name:?} is {}, not float32", rec.dtype().name()),
            )
        })?;
        *len = data.len();
        if out.is_null() {
            return Ok(());
        }
        if cap < data.len() {
            return Err(Fail(
                PtqStatus::BufferTooSmall,
                format!("tensor {name:?} has {} elements, buffer holds {cap}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// Quantizes with the default policy (skip patterns and minimum size) at
/// the given method, bits and OCS expansion ratio.
///
/// # Safety
/// `archive` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_quantize_archive(
    archive: *const PtqArchive,
    method: PtqMethod,
    bits: u32,
    ocs_ratio: f64,
    out: *mut *mut PtqArchive,
) -> PtqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let a = archive_ref(archive)?;
        let mut policy = QuantPolicy::new(method.into(), bits_arg(bits)?);
        policy.ocs_ratio = ocs_ratio;
        let (q, _) = pipeline::quantize_archive(&a.inner, &policy)?;
        *out = PtqArchive::boxed(q);
        Ok(())
    })
}

/// # Safety
/// `archive` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_dequantize_archive(archive: *const PtqArchive, out: *mut *mut PtqArchive) -> PtqStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let a = archive_ref(archive)?;
        *out = PtqArchive::boxed(pipeline::dequantize_archive(&a.inner)?);
        Ok(())
    })
}

/// # Safety
/// `step` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_compute_step(max_abs: f64, bits: u32, step: *mut f32) -> PtqStatus {
    guard(|| {
        let step = out_arg(step, "step")?;
        *step = quant::compute_step(max_abs, bits_arg(bits)?)?;
        Ok(())
    })
}

/// Optimal clipping threshold for a Gaussian of standard deviation `sigma`.
///
/// # Safety
/// `alpha` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ptq_aciq_solve_alpha(sigma: f64, bits: u32, alpha: *mut f64) -> PtqStatus {
    guard(|| {
        let alpha = out_arg(alpha, "alpha")?;
        *alpha = aciq::solve_alpha(sigma, bits_arg(bits)?)?.alpha;
        Ok(())
    })
}

/// Symmetric linear quantization of `len` floats into `codes`.
///
/// # Safety
/// `data` must hold `len` floats, `codes` room for `len` bytes, `step` be valid.
#[no_mangle]
pub unsafe extern "C" fn ptq_quantize_lq(
    data: *const f32,
    len: usize,
    bits: u32,
    codes: *mut i8,
    step: *mut f32,
) -> PtqStatus {
    guard(|| {
        let step = out_arg(step, "step")?;
        if len > 0 && (data.is_null() || codes.is_null()) {
            return Err(null("buffer"));
        }
        let x = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        let q = quant::quantize_lq(&Tensor::from_vec(x), bits_arg(bits)?)?;
        if len > 0 {
            ptr::copy_nonoverlapping(q.codes.as_ptr(), codes, len);
        }
        *step = q.params.step;
        Ok(())
    })
}
