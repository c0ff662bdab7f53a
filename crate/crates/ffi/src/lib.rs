//! C ABI for the denoising engine: load a trained checkpoint, run
//! full-image inference, degrade images, and compute quality metrics.
//!
//! Conventions: every fallible call returns a [`DnrStatus`]; results travel
//! through out-parameters. On failure, [`dnr_last_error`] returns a
//! thread-local UTF-8 message valid until the next call on that thread.
//! Image buffers are row-major `height * width` float arrays in [0, 1].
//! Handles from [`dnr_network_load`] must be released with
//! [`dnr_network_free`]; they are immutable, so sharing a handle across
//! threads for concurrent reads is safe.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dnres_forge::checkpoint::load_checkpoint;
use dnres_forge::eval::{denoise_image, BorderRule};
use dnres_forge::metrics::{psnr, ssim, SsimParams};
use dnres_forge::network::Network;
use dnres_forge::noise::{degrade, NoiseModel};
use dnres_forge::rng::{stream_rng, StreamRole};
use dnres_forge::tensor::{Shape, Tensor};
use dnres_forge::topology::CountMode;
use dnres_forge::Error;

/// Call outcome. Anything but `DNR_STATUS_OK` leaves a message in
/// `dnr_last_error`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DnrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    IoError = 3,
    FormatError = 4,
    ShapeMismatch = 5,
    InternalError = 6,
}

/// Border handling for full-image inference.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DnrBorder {
    Replicate = 0,
    Reflect = 1,
}

/// Opaque handle to a loaded network.
pub struct DnrNetwork {
    inner: Network<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn status_of(err: &Error) -> DnrStatus {
    match err {
        Error::InvalidArgument(_) | Error::InvalidTopology(_) => DnrStatus::InvalidArgument,
        Error::Io { .. } => DnrStatus::IoError,
        Error::Format { .. } => DnrStatus::FormatError,
        Error::ShapeMismatch { .. } => DnrStatus::ShapeMismatch,
        Error::NonFinite(_) => DnrStatus::InternalError,
    }
}

/// Run `f` with panics converted to `DNR_STATUS_INTERNAL_ERROR`.
fn guarded(f: impl FnOnce() -> DnrStatus) -> DnrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            DnrStatus::InternalError
        }
    }
}

fn fail(err: &Error) -> DnrStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn null_arg(what: &str) -> DnrStatus {
    set_error(&format!("{what} must not be null"));
    DnrStatus::NullArgument
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dnr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next dnres call on the same thread.
#[no_mangle]
pub extern "C" fn dnr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint from `path` into a fresh handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_load(
    path: *const c_char,
    out: *mut *mut DnrNetwork,
) -> DnrStatus {
    guarded(|| {
        if path.is_null() {
            return null_arg("path");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return DnrStatus::InvalidArgument;
            }
        };
        match load_checkpoint(path) {
            Ok((network, _meta)) => {
                let handle = Box::new(DnrNetwork { inner: network });
                unsafe { *out = Box::into_raw(handle) };
                DnrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a handle. Passing null is a no-op.
///
/// # Safety
/// `net` must be a pointer from `dnr_network_load`, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_free(net: *mut DnrNetwork) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Copy the topology identifier (such as "dn7-ds2") into `buf`.
///
/// # Safety
/// `buf` must hold at least `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_topology_id(
    net: *const DnrNetwork,
    buf: *mut c_char,
    cap: usize,
) -> DnrStatus {
    guarded(|| {
        let Some(net) = (unsafe { net.as_ref() }) else {
            return null_arg("net");
        };
        if buf.is_null() {
            return null_arg("buf");
        }
        let id = net.inner.topology().id();
        if id.len() + 1 > cap {
            set_error(&format!("buffer of {cap} bytes too small for '{id}'"));
            return DnrStatus::InvalidArgument;
        }
        unsafe {
            std::ptr::copy_nonoverlapping(id.as_ptr(), buf as *mut u8, id.len());
            *buf.add(id.len()) = 0;
        }
        DnrStatus::Ok
    })
}

/// Number of convolution layers (residual blocks count two each).
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_conv_layer_count(
    net: *const DnrNetwork,
    out: *mut u32,
) -> DnrStatus {
    guarded(|| {
        let Some(net) = (unsafe { net.as_ref() }) else {
            return null_arg("net");
        };
        if out.is_null() {
            return null_arg("out");
        }
        unsafe { *out = net.inner.topology().conv_layer_count() as u32 };
        DnrStatus::Ok
    })
}

/// Learnable parameter count; `with_bias` of 0 counts weights only.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_param_count(
    net: *const DnrNetwork,
    with_bias: i32,
    out: *mut u64,
) -> DnrStatus {
    guarded(|| {
        let Some(net) = (unsafe { net.as_ref() }) else {
            return null_arg("net");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let mode = if with_bias != 0 {
            CountMode::WithBias
        } else {
            CountMode::WeightsOnly
        };
        unsafe { *out = net.inner.topology().count_params(mode) };
        DnrStatus::Ok
    })
}

/// Multiply-accumulate count for one `height` x `width` inference.
///
/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_mac_count(
    net: *const DnrNetwork,
    height: usize,
    width: usize,
    out: *mut u64,
) -> DnrStatus {
    guarded(|| {
        let Some(net) = (unsafe { net.as_ref() }) else {
            return null_arg("net");
        };
        if out.is_null() {
            return null_arg("out");
        }
        unsafe { *out = net.inner.topology().count_macs(height, width) };
        DnrStatus::Ok
    })
}

fn image_from_raw(ptr: *const f32, height: usize, width: usize, what: &str) -> Result<Tensor<f32>, DnrStatus> {
    if ptr.is_null() {
        return Err(null_arg(what));
    }
    let Some(len) = height.checked_mul(width).filter(|&l| l > 0) else {
        set_error(&format!("{what}: bad dimensions {height}x{width}"));
        return Err(DnrStatus::InvalidArgument);
    };
    let data = unsafe { std::slice::from_raw_parts(ptr, len) };
    Ok(Tensor::new(Shape::new(1, 1, height, width), data.to_vec()).expect("sized above"))
}

/// Denoise a `height` x `width` image; `output` receives the same extent.
/// Input and output may alias only fully (identical pointers are fine).
///
/// # Safety
/// `input` and `output` must each point to `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn dnr_network_denoise(
    net: *const DnrNetwork,
    input: *const f32,
    height: usize,
    width: usize,
    border: DnrBorder,
    output: *mut f32,
) -> DnrStatus {
    guarded(|| {
        let Some(net) = (unsafe { net.as_ref() }) else {
            return null_arg("net");
        };
        if output.is_null() {
            return null_arg("output");
        }
        let img = match image_from_raw(input, height, width, "input") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let rule = match border {
            DnrBorder::Replicate => BorderRule::Replicate,
            DnrBorder::Reflect => BorderRule::Reflect,
        };
        match denoise_image(&net.inner, &img, rule) {
            Ok(out) => {
                unsafe {
                    std::ptr::copy_nonoverlapping(out.data().as_ptr(), output, height * width)
                };
                DnrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Degrade a clean image under a noise spec ("gaussian:25", "poisson:4",
/// "poisson-gaussian:SIGMA[:PEAK]"). Identical (spec, seed, input) triples
/// produce identical bytes.
///
/// # Safety
/// `spec` must be NUL-terminated; `input`/`output` must each point to
/// `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn dnr_degrade(
    spec: *const c_char,
    input: *const f32,
    height: usize,
    width: usize,
    seed: u64,
    output: *mut f32,
) -> DnrStatus {
    guarded(|| {
        if spec.is_null() {
            return null_arg("spec");
        }
        if output.is_null() {
            return null_arg("output");
        }
        let spec = match unsafe { CStr::from_ptr(spec) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("spec is not valid UTF-8");
                return DnrStatus::InvalidArgument;
            }
        };
        let model = match NoiseModel::parse_spec(spec) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let clean = match image_from_raw(input, height, width, "input") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let mut rng = stream_rng(seed, StreamRole::Noise, 0);
        match degrade(&clean, &model, &mut rng) {
            Ok(noisy) => {
                unsafe {
                    std::ptr::copy_nonoverlapping(noisy.data().as_ptr(), output, height * width)
                };
                DnrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Peak signal-to-noise ratio between two buffers on a `max_val` scale.
/// Identical buffers yield positive infinity.
///
/// # Safety
/// `a` and `b` must each point to `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dnr_psnr(
    a: *const f32,
    b: *const f32,
    len: usize,
    max_val: f64,
    out: *mut f64,
) -> DnrStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let x = match image_from_raw(a, 1, len, "a") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let y = match image_from_raw(b, 1, len, "b") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match psnr(&x, &y, max_val) {
            Ok(v) => {
                unsafe { *out = v };
                DnrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Mean structural similarity with the standard 11-tap Gaussian window on
/// a [0,1] scale. Requires `height` and `width` of at least 11.
///
/// # Safety
/// `a` and `b` must each point to `height * width` floats; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dnr_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> DnrStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let x = match image_from_raw(a, height, width, "a") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let y = match image_from_raw(b, height, width, "b") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ssim(&x, &y, &SsimParams::default()) {
            Ok(v) => {
                unsafe { *out = v };
                DnrStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
