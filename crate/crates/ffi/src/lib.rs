//! C ABI over the otaro codec, container, memory estimator and bit-width scheduler.
//!
//! Every function returns an [`OtaroStatus`]; results come back through out
//! pointers. Objects are opaque handles released with their `_free` function.
//! After a failure `otaro_last_error` holds a message for the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use otaro::bps::ScheduleState;
use otaro::container::{self, Container, ContainerError, DeviceModelSpec, KvPrecision, StoragePrecision};
use otaro::sefp::{self, BitWidthConfig, BitWidthSet, CodecError, RoundingMode, SefpTensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtaroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonFinite = 3,
    ExponentOverflow = 4,
    BadFormat = 5,
    Io = 6,
    BufferTooSmall = 7,
    InvalidState = 8,
    Panic = 9,
}

/// Rounding used when encoding.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtaroRounding {
    Truncate = 0,
    RoundHalfEven = 1,
}

/// An encoded SEFP tensor.
pub struct OtaroTensor(SefpTensor);

/// A parsed `.sefp` container.
pub struct OtaroContainer(Container);

/// Bandit bit-width scheduler.
pub struct OtaroScheduler(ScheduleState);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OtaroModelSpec {
    pub parameter_count: u64,
    pub layer_count: u64,
    pub kv_head_count: u64,
    pub head_dim: u64,
    pub context_tokens: u64,
    /// Nonzero keeps the KV cache in fp16 instead of the weight format.
    pub kv_fp16: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct OtaroMemoryEstimate {
    pub bits_per_weight: f64,
    pub weight_bytes: f64,
    pub kv_bytes: f64,
    pub total_bytes: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: OtaroStatus, msg: impl Into<String>) -> OtaroStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn codec_status(e: &CodecError) -> OtaroStatus {
    let s = match e {
        CodecError::NonFinite { .. } => OtaroStatus::NonFinite,
        CodecError::ExponentOverflow { .. } => OtaroStatus::ExponentOverflow,
        CodecError::Malformed(_) => OtaroStatus::BadFormat,
        _ => OtaroStatus::InvalidArgument,
    };
    fail(s, e.to_string())
}

fn container_status(e: &ContainerError) -> OtaroStatus {
    let s = match e {
        ContainerError::Io(_) => OtaroStatus::Io,
        ContainerError::Codec(c) => return codec_status(c),
        ContainerError::MixedConfig { .. } | ContainerError::NameTooLong(_) | ContainerError::TooLarge(_) => {
            OtaroStatus::InvalidArgument
        }
        _ => OtaroStatus::BadFormat,
    };
    fail(s, e.to_string())
}

/// Runs `f`, turning a panic into `Panic` instead of unwinding into C.
fn guard(f: impl FnOnce() -> OtaroStatus) -> OtaroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(OtaroStatus::Panic, "internal panic"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(OtaroStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> &'a [T] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, len)
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, OtaroStatus> {
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OtaroStatus::InvalidArgument, "path is not UTF-8"))
}

fn config(e: u8, m: u8) -> Result<BitWidthConfig, OtaroStatus> {
    BitWidthConfig::new(e, m).map_err(|err| codec_status(&err))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn otaro_status_str(status: OtaroStatus) -> *const c_char {
    let s: &'static CStr = match status {
        OtaroStatus::Ok => c"ok",
        OtaroStatus::NullPointer => c"null pointer",
        OtaroStatus::InvalidArgument => c"invalid argument",
        OtaroStatus::NonFinite => c"non-finite input",
        OtaroStatus::ExponentOverflow => c"exponent overflow",
        OtaroStatus::BadFormat => c"malformed data",
        OtaroStatus::Io => c"i/o error",
        OtaroStatus::BufferTooSmall => c"buffer too small",
        OtaroStatus::InvalidState => c"invalid state",
        OtaroStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Copies the calling thread's last error message (NUL-terminated, truncated to `cap`).
/// `needed`, if non-null, receives the full length including the NUL.
#[no_mangle]
pub unsafe extern "C" fn otaro_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> OtaroStatus {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        copy_str(&msg, buf, cap, needed)
    })
}

unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> OtaroStatus {
    let bytes = s.as_bytes();
    if !needed.is_null() {
        *needed = bytes.len() + 1;
    }
    if buf.is_null() || cap == 0 {
        return if cap == 0 && !needed.is_null() {
            OtaroStatus::Ok
        } else {
            OtaroStatus::NullPointer
        };
    }
    let n = bytes.len().min(cap - 1);
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
    *buf.add(n) = 0;
    if n < bytes.len() {
        OtaroStatus::BufferTooSmall
    } else {
        OtaroStatus::Ok
    }
}

/// Encodes `len` values as E`exponent_bits`M`mantissa_bits` in groups of `group_size`.
#[no_mangle]
pub unsafe extern "C" fn otaro_quantize(
    values: *const f64,
    len: usize,
    exponent_bits: u8,
    mantissa_bits: u8,
    group_size: usize,
    rounding: OtaroRounding,
    out: *mut *mut OtaroTensor,
) -> OtaroStatus {
    guard(|| {
        non_null!(out);
        if len > 0 {
            non_null!(values);
        }
        let cfg = match config(exponent_bits, mantissa_bits) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let mode = match rounding {
            OtaroRounding::Truncate => RoundingMode::TruncateTowardZero,
            OtaroRounding::RoundHalfEven => RoundingMode::RoundHalfEven,
        };
        match sefp::quantize(slice(values, len), cfg, group_size, mode) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(OtaroTensor(t)));
                OtaroStatus::Ok
            }
            Err(e) => codec_status(&e),
        }
    })
}

/// New tensor holding `tensor` cut to `mantissa_bits`.
#[no_mangle]
pub unsafe extern "C" fn otaro_truncate(
    tensor: *const OtaroTensor,
    mantissa_bits: u8,
    out: *mut *mut OtaroTensor,
) -> OtaroStatus {
    guard(|| {
        non_null!(tensor, out);
        let t = &(*tensor).0;
        let target = match config(t.config().exponent_bits(), mantissa_bits) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match sefp::truncate_precision(t, target) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(OtaroTensor(t)));
                OtaroStatus::Ok
            }
            Err(e) => codec_status(&e),
        }
    })
}

/// Decodes into `out`, which must hold `otaro_tensor_len` values.
#[no_mangle]
pub unsafe extern "C" fn otaro_dequantize(tensor: *const OtaroTensor, out: *mut f64, cap: usize) -> OtaroStatus {
    guard(|| {
        non_null!(tensor);
        let t = &(*tensor).0;
        if cap < t.len() {
            return fail(OtaroStatus::BufferTooSmall, format!("need {} values, buffer holds {cap}", t.len()));
        }
        if !t.is_empty() {
            non_null!(out);
            let d = sefp::dequantize(t);
            ptr::copy_nonoverlapping(d.as_ptr(), out, d.len());
        }
        OtaroStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_tensor_len(tensor: *const OtaroTensor, len: *mut usize) -> OtaroStatus {
    guard(|| {
        non_null!(tensor, len);
        *len = (*tensor).0.len();
        OtaroStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_tensor_mantissa_bits(tensor: *const OtaroTensor, m: *mut u8) -> OtaroStatus {
    guard(|| {
        non_null!(tensor, m);
        *m = (*tensor).0.config().mantissa_bits();
        OtaroStatus::Ok
    })
}

/// Raw planes: `group_count` biased exponents and `len` mantissas. Either pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn otaro_tensor_planes(
    tensor: *const OtaroTensor,
    exponents: *mut u8,
    exponents_cap: usize,
    mantissas: *mut u16,
    mantissas_cap: usize,
) -> OtaroStatus {
    guard(|| {
        non_null!(tensor);
        let t = &(*tensor).0;
        if !exponents.is_null() {
            if exponents_cap < t.group_count() {
                return fail(OtaroStatus::BufferTooSmall, "exponent buffer too small");
            }
            ptr::copy_nonoverlapping(t.shared_exponents().as_ptr(), exponents, t.group_count());
        }
        if !mantissas.is_null() {
            if mantissas_cap < t.len() {
                return fail(OtaroStatus::BufferTooSmall, "mantissa buffer too small");
            }
            ptr::copy_nonoverlapping(t.mantissas().as_ptr(), mantissas, t.len());
        }
        OtaroStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_tensor_free(tensor: *mut OtaroTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Writes `count` named tensors (all sharing one width and group size) to `path`.
#[no_mangle]
pub unsafe extern "C" fn otaro_container_write(
    path: *const c_char,
    names: *const *const c_char,
    tensors: *const *const OtaroTensor,
    count: usize,
) -> OtaroStatus {
    guard(|| {
        non_null!(path, names, tensors);
        if count == 0 {
            return fail(OtaroStatus::InvalidArgument, "at least one tensor is required");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mut items = Vec::with_capacity(count);
        for (&n, &t) in slice(names, count).iter().zip(slice(tensors, count)) {
            non_null!(n, t);
            let name = match CStr::from_ptr(n).to_str() {
                Ok(s) => s.to_owned(),
                Err(_) => return fail(OtaroStatus::InvalidArgument, "tensor name is not UTF-8"),
            };
            items.push((name, (*t).0.clone()));
        }
        let c = match Container::from_tensors(items) {
            Ok(c) => c,
            Err(e) => return container_status(&e),
        };
        let file = match File::create(path) {
            Ok(f) => f,
            Err(e) => return fail(OtaroStatus::Io, format!("{path}: {e}")),
        };
        let mut w = BufWriter::new(file);
        if let Err(e) = container::write(&c, &mut w) {
            return container_status(&e);
        }
        match w.flush() {
            Ok(()) => OtaroStatus::Ok,
            Err(e) => fail(OtaroStatus::Io, format!("{path}: {e}")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_container_read(path: *const c_char, out: *mut *mut OtaroContainer) -> OtaroStatus {
    guard(|| {
        non_null!(path, out);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) => return fail(OtaroStatus::Io, format!("{path}: {e}")),
        };
        match container::read(&mut BufReader::new(file)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(OtaroContainer(c)));
                OtaroStatus::Ok
            }
            Err(e) => container_status(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_container_len(c: *const OtaroContainer, len: *mut usize) -> OtaroStatus {
    guard(|| {
        non_null!(c, len);
        *len = (*c).0.tensors().len();
        OtaroStatus::Ok
    })
}

/// Copies the name of tensor `index`; see `otaro_last_error` for the buffer convention.
#[no_mangle]
pub unsafe extern "C" fn otaro_container_name(
    c: *const OtaroContainer,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> OtaroStatus {
    guard(|| {
        non_null!(c);
        match (*c).0.tensors().get(index) {
            Some((name, _)) => copy_str(name, buf, cap, needed),
            None => fail(OtaroStatus::InvalidArgument, format!("no tensor at index {index}")),
        }
    })
}

/// A new handle holding a copy of tensor `index`.
#[no_mangle]
pub unsafe extern "C" fn otaro_container_tensor(
    c: *const OtaroContainer,
    index: usize,
    out: *mut *mut OtaroTensor,
) -> OtaroStatus {
    guard(|| {
        non_null!(c, out);
        match (*c).0.tensors().get(index) {
            Some((_, t)) => {
                *out = Box::into_raw(Box::new(OtaroTensor(t.clone())));
                OtaroStatus::Ok
            }
            None => fail(OtaroStatus::InvalidArgument, format!("no tensor at index {index}")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_container_free(c: *mut OtaroContainer) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Weight plus KV-cache bytes. `mantissa_bits == 0` means fp16 storage.
#[no_mangle]
pub unsafe extern "C" fn otaro_estimate_memory(
    spec: *const OtaroModelSpec,
    exponent_bits: u8,
    mantissa_bits: u8,
    group_size: usize,
    out: *mut OtaroMemoryEstimate,
) -> OtaroStatus {
    guard(|| {
        non_null!(spec, out);
        let s = &*spec;
        let spec = DeviceModelSpec {
            name: String::new(),
            parameter_count: s.parameter_count,
            layer_count: s.layer_count,
            kv_head_count: s.kv_head_count,
            head_dim: s.head_dim,
            context_tokens: s.context_tokens,
            kv_precision: if s.kv_fp16 != 0 {
                KvPrecision::Fp16
            } else {
                KvPrecision::SameAsWeights
            },
        };
        if let Err(m) = spec.validate() {
            return fail(OtaroStatus::InvalidArgument, m);
        }
        if group_size == 0 {
            return fail(OtaroStatus::InvalidArgument, "group size must be at least 1");
        }
        let precision = if mantissa_bits == 0 {
            StoragePrecision::Fp16
        } else {
            match config(exponent_bits, mantissa_bits) {
                Ok(c) => StoragePrecision::Sefp(c),
                Err(st) => return st,
            }
        };
        let e = container::estimate_memory(&spec, precision, group_size);
        *out = OtaroMemoryEstimate {
            bits_per_weight: e.bits_per_weight,
            weight_bytes: e.weight_bytes,
            kv_bytes: e.kv_bytes,
            total_bytes: e.total_bytes,
        };
        OtaroStatus::Ok
    })
}

/// Scheduler over E`exponent_bits`M`m_high` down to M`m_low`.
#[no_mangle]
pub unsafe extern "C" fn otaro_scheduler_new(
    exponent_bits: u8,
    m_high: u8,
    m_low: u8,
    lambda: f64,
    out: *mut *mut OtaroScheduler,
) -> OtaroStatus {
    guard(|| {
        non_null!(out);
        let widths = match BitWidthSet::range(exponent_bits, m_high, m_low) {
            Ok(w) => w,
            Err(e) => return codec_status(&e),
        };
        match ScheduleState::new(widths, lambda) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(OtaroScheduler(s)));
                OtaroStatus::Ok
            }
            Err(e) => fail(OtaroStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Picks the next width; its mantissa bits go to `mantissa_bits`.
#[no_mangle]
pub unsafe extern "C" fn otaro_scheduler_select(s: *mut OtaroScheduler, mantissa_bits: *mut u8) -> OtaroStatus {
    guard(|| {
        non_null!(s, mantissa_bits);
        match (*s).0.select() {
            Ok(sel) => {
                *mantissa_bits = sel.width.mantissa_bits();
                OtaroStatus::Ok
            }
            Err(e) => fail(OtaroStatus::InvalidState, e.to_string()),
        }
    })
}

/// Reports the loss observed at the width returned by the last select.
#[no_mangle]
pub unsafe extern "C" fn otaro_scheduler_report(s: *mut OtaroScheduler, mantissa_bits: u8, loss: f64) -> OtaroStatus {
    guard(|| {
        non_null!(s);
        let sched = &mut (*s).0;
        let e = sched.widths().highest().exponent_bits();
        let width = match config(e, mantissa_bits) {
            Ok(w) => w,
            Err(st) => return st,
        };
        match sched.report_loss(&width, loss) {
            Ok(()) => OtaroStatus::Ok,
            Err(err @ otaro::bps::ScheduleError::NonFiniteLoss(_)) => fail(OtaroStatus::NonFinite, err.to_string()),
            Err(err @ otaro::bps::ScheduleError::UnknownWidth(_)) => {
                fail(OtaroStatus::InvalidArgument, err.to_string())
            }
            Err(err) => fail(OtaroStatus::InvalidState, err.to_string()),
        }
    })
}

/// Selections made so far of the width with `mantissa_bits`.
#[no_mangle]
pub unsafe extern "C" fn otaro_scheduler_count(s: *const OtaroScheduler, mantissa_bits: u8, count: *mut u64) -> OtaroStatus {
    guard(|| {
        non_null!(s, count);
        let sched = &(*s).0;
        let e = sched.widths().highest().exponent_bits();
        let width = match config(e, mantissa_bits) {
            Ok(w) => w,
            Err(st) => return st,
        };
        match sched.count(&width) {
            Some(c) => {
                *count = c;
                OtaroStatus::Ok
            }
            None => fail(OtaroStatus::InvalidArgument, format!("{width} is not scheduled")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn otaro_scheduler_free(s: *mut OtaroScheduler) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
