//! C ABI for the canfvc codec.
//!
//! Every function returns a [`CanfvcStatus`]. On failure a message is kept
//! per thread and can be read with [`canfvc_last_error`]. Buffers handed out
//! by the library must be released with [`canfvc_buffer_free`], handles with
//! [`canfvc_codec_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use canfvc::checkpoint::{lambda_index, load_model};
use canfvc::entropy::Bitstream;
use canfvc::frames::Frame;
use canfvc::metrics::{bd_rate, psnr, RdCurve, RdPoint};
use canfvc::model::CanfVcpp;
use canfvc::nn::ParamStore;
use canfvc::pipeline::{decode_sequence, encode_sequence};
use canfvc::{Error, ModelConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanfvcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Bitstream = 5,
    Shape = 6,
    Metric = 7,
    NoFrames = 8,
    Internal = 9,
    Panic = 10,
}

/// A loaded model and its rate setting.
pub struct CanfvcCodec {
    _store: ParamStore,
    model: CanfVcpp,
    lambda: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CanfvcStatus {
    match e {
        Error::Io { .. } | Error::Image(_) | Error::UnsupportedBitDepth(_) => CanfvcStatus::Io,
        Error::Checkpoint(_) => CanfvcStatus::Checkpoint,
        Error::Bitstream(_) | Error::CoderDesync(_) | Error::ZeroWidthSymbol(_) => CanfvcStatus::Bitstream,
        Error::Shape(_) => CanfvcStatus::Shape,
        Error::Metric(_) => CanfvcStatus::Metric,
        Error::NoFrames => CanfvcStatus::NoFrames,
        Error::InvalidArgument(_) | Error::Config(_) | Error::SequenceTooShort { .. } => CanfvcStatus::InvalidArgument,
        _ => CanfvcStatus::Internal,
    }
}

/// Runs `f`, recording the error message and catching panics.
fn guard(f: impl FnOnce() -> Result<(), (CanfvcStatus, String)>) -> CanfvcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CanfvcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CanfvcStatus::Panic
        }
    }
}

fn lib(e: Error) -> (CanfvcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CanfvcStatus, String) {
    (CanfvcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (CanfvcStatus, String) {
    (CanfvcStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (CanfvcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn export(bytes: Vec<u8>, out: *mut *mut u8, out_len: *mut usize) {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    // SAFETY: both pointers were checked to be non-null by the caller.
    unsafe {
        *out_len = len;
        *out = Box::into_raw(boxed) as *mut u8;
    }
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn canfvc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn canfvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn canfvc_codec_open(path: *const c_char, out: *mut *mut CanfvcCodec) -> CanfvcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| invalid(format!("path: {e}")))?;
        let (store, model, manifest) = load_model(Path::new(p)).map_err(lib)?;
        *out = Box::into_raw(Box::new(CanfvcCodec {
            _store: store,
            model,
            lambda: manifest.lambda,
        }));
        Ok(())
    })
}

/// Creates an untrained tiny model, for tests and bindings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn canfvc_codec_new_untrained(lambda: u32, seed: u64, out: *mut *mut CanfvcCodec) -> CanfvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        lambda_index(lambda).map_err(lib)?;
        let store = ParamStore::new(seed);
        let model = CanfVcpp::new(&store, &ModelConfig::tiny()).map_err(lib)?;
        *out = Box::into_raw(Box::new(CanfvcCodec {
            _store: store,
            model,
            lambda,
        }));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from this library and not be used afterwards. Null is
/// accepted.
#[no_mangle]
pub unsafe extern "C" fn canfvc_codec_free(codec: *mut CanfvcCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// λ of the loaded model, 0 for a null handle.
///
/// # Safety
/// `codec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn canfvc_codec_lambda(codec: *const CanfvcCodec) -> u32 {
    codec.as_ref().map_or(0, |c| c.lambda)
}

/// Encodes `num_frames` consecutive interleaved RGB24 frames of
/// `width × height` into a bitstream.
///
/// # Safety
/// `rgb` must hold `3 · width · height · num_frames` bytes; `out_data` and
/// `out_len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn canfvc_encode(
    codec: *const CanfvcCodec,
    rgb: *const u8,
    width: u32,
    height: u32,
    num_frames: u32,
    gop: u32,
    out_data: *mut *mut u8,
    out_len: *mut usize,
) -> CanfvcStatus {
    guard(|| {
        let codec = codec.as_ref().ok_or_else(|| null("codec"))?;
        if out_data.is_null() || out_len.is_null() {
            return Err(null("output"));
        }
        let (w, h, n) = (width as usize, height as usize, num_frames as usize);
        if w == 0 || h == 0 {
            return Err(invalid(format!("frame size {w}x{h}")));
        }
        if n == 0 {
            return Err((CanfvcStatus::NoFrames, "no frames to encode".into()));
        }
        let data = slice(rgb, 3 * w * h * n, "rgb")?;
        let frames = data
            .chunks_exact(3 * w * h)
            .map(|c| Frame::from_rgb8(c, h, w))
            .collect::<canfvc::Result<Vec<_>>>()
            .map_err(lib)?;
        let r = encode_sequence(&codec.model, &frames, gop as usize, codec.lambda, true).map_err(lib)?;
        let bs = r.bitstream.expect("the coder was on");
        export(bs.to_bytes(), out_data, out_len);
        Ok(())
    })
}

/// Decodes a bitstream into consecutive interleaved RGB24 frames.
///
/// # Safety
/// `data` must hold `len` bytes; every output pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn canfvc_decode(
    codec: *const CanfvcCodec,
    data: *const u8,
    len: usize,
    out_rgb: *mut *mut u8,
    out_len: *mut usize,
    out_width: *mut u32,
    out_height: *mut u32,
    out_frames: *mut u32,
) -> CanfvcStatus {
    guard(|| {
        let codec = codec.as_ref().ok_or_else(|| null("codec"))?;
        if out_rgb.is_null() || out_len.is_null() || out_width.is_null() || out_height.is_null() || out_frames.is_null() {
            return Err(null("output"));
        }
        let bytes = slice(data, len, "data")?;
        let bs = Bitstream::from_bytes(bytes).map_err(lib)?;
        let frames = decode_sequence(&codec.model, &bs, codec.lambda).map_err(lib)?;
        let mut rgb = Vec::with_capacity(frames.len() * 3 * bs.header.width as usize * bs.header.height as usize);
        for f in &frames {
            rgb.extend_from_slice(&f.to_rgb8());
        }
        *out_width = bs.header.width as u32;
        *out_height = bs.header.height as u32;
        *out_frames = frames.len() as u32;
        export(rgb, out_rgb, out_len);
        Ok(())
    })
}

/// Releases a buffer returned by this library.
///
/// # Safety
/// `ptr` and `len` must be exactly what the library returned. Null is
/// accepted.
#[no_mangle]
pub unsafe extern "C" fn canfvc_buffer_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// PSNR in dB of two 8-bit buffers of `len` samples (peak 255). Identical
/// buffers give +infinity.
///
/// # Safety
/// `a` and `b` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn canfvc_psnr_rgb8(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> CanfvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a: Vec<f64> = slice(a, len, "a")?.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = slice(b, len, "b")?.iter().map(|&v| v as f64).collect();
        *out = psnr(&a, &b, 255.0).map_err(lib)?;
        Ok(())
    })
}

/// Bjøntegaard delta rate in percent of a test curve against an anchor.
///
/// # Safety
/// Each array must hold the stated number of points; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn canfvc_bd_rate(
    anchor_bpp: *const f64,
    anchor_psnr: *const f64,
    anchor_len: usize,
    test_bpp: *const f64,
    test_psnr: *const f64,
    test_len: usize,
    out: *mut f64,
) -> CanfvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let curve = |bpp: &[f64], psnr: &[f64]| {
            RdCurve::new(bpp.iter().zip(psnr).map(|(&bpp, &psnr)| RdPoint { bpp, psnr }).collect()).map_err(lib)
        };
        let a = curve(slice(anchor_bpp, anchor_len, "anchor_bpp")?, slice(anchor_psnr, anchor_len, "anchor_psnr")?)?;
        let t = curve(slice(test_bpp, test_len, "test_bpp")?, slice(test_psnr, test_len, "test_psnr")?)?;
        *out = bd_rate(&a, &t).map_err(lib)?;
        Ok(())
    })
}
