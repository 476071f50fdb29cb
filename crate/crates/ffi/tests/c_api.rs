use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use canfvc_ffi::*;

fn untrained(lambda: u32) -> *mut CanfvcCodec {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { canfvc_codec_new_untrained(lambda, 7, &mut h) }, CanfvcStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let p = canfvc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn gradient_frames(w: usize, h: usize, n: usize) -> Vec<u8> {
    (0..n * h * w * 3)
        .map(|i| {
            let px = i / 3 % (w * h);
            let t = i / (3 * w * h);
            ((px % w) * 4 + (px / w) * 2 + t * 3 + (i % 3) * 40) as u8
        })
        .collect()
}

#[test]
fn encode_decode_roundtrip_through_the_c_api() {
    let codec = untrained(1024);
    assert_eq!(unsafe { canfvc_codec_lambda(codec) }, 1024);
    let (w, h, n) = (40usize, 24usize, 3usize);
    let rgb = gradient_frames(w, h, n);
    let (mut bits, mut bits_len) = (ptr::null_mut(), 0usize);
    let st = unsafe { canfvc_encode(codec, rgb.as_ptr(), w as u32, h as u32, n as u32, 2, &mut bits, &mut bits_len) };
    assert_eq!(st, CanfvcStatus::Ok, "{}", last_error());
    assert!(bits_len > 11);

    let (mut out, mut out_len, mut ow, mut oh, mut of) = (ptr::null_mut(), 0usize, 0u32, 0u32, 0u32);
    let st = unsafe { canfvc_decode(codec, bits, bits_len, &mut out, &mut out_len, &mut ow, &mut oh, &mut of) };
    assert_eq!(st, CanfvcStatus::Ok, "{}", last_error());
    assert_eq!((ow, oh, of), (w as u32, h as u32, n as u32));
    assert_eq!(out_len, rgb.len());

    let mut p = 0.0;
    let st = unsafe { canfvc_psnr_rgb8(rgb.as_ptr(), out, out_len, &mut p) };
    assert_eq!(st, CanfvcStatus::Ok);
    assert!(p.is_finite() && p > 0.0);

    // a second decode of the same stream is identical
    let (mut again, mut again_len) = (ptr::null_mut(), 0usize);
    let st = unsafe { canfvc_decode(codec, bits, bits_len, &mut again, &mut again_len, &mut ow, &mut oh, &mut of) };
    assert_eq!(st, CanfvcStatus::Ok);
    unsafe {
        assert_eq!(std::slice::from_raw_parts(out, out_len), std::slice::from_raw_parts(again, again_len));
        canfvc_buffer_free(again, again_len);
        canfvc_buffer_free(out, out_len);
        canfvc_buffer_free(bits, bits_len);
        canfvc_codec_free(codec);
    }
}

#[test]
fn errors_are_codes_with_messages() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { canfvc_codec_new_untrained(1000, 0, &mut h) }, CanfvcStatus::InvalidArgument);
    assert!(last_error().contains("1000"));
    assert_eq!(unsafe { canfvc_codec_new_untrained(2048, 0, ptr::null_mut()) }, CanfvcStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let st = unsafe { canfvc_codec_open(missing.as_ptr(), &mut h) };
    assert_ne!(st, CanfvcStatus::Ok);
    assert!(h.is_null());

    let codec = untrained(2048);
    let (mut out, mut len, mut w, mut hh, mut n) = (ptr::null_mut(), 0usize, 0u32, 0u32, 0u32);
    let garbage = [1u8, 2, 3];
    let st = unsafe { canfvc_decode(codec, garbage.as_ptr(), garbage.len(), &mut out, &mut len, &mut w, &mut hh, &mut n) };
    assert_eq!(st, CanfvcStatus::Bitstream);
    let st = unsafe { canfvc_decode(codec, ptr::null(), 0, &mut out, &mut len, &mut w, &mut hh, &mut n) };
    assert_eq!(st, CanfvcStatus::NoFrames);
    let st = unsafe { canfvc_encode(codec, ptr::null(), 16, 16, 1, 4, &mut out, &mut len) };
    assert_eq!(st, CanfvcStatus::NullPointer);
    assert!(out.is_null());

    // a stream coded at another λ is refused
    let other = untrained(256);
    let rgb = gradient_frames(16, 16, 1);
    let (mut bits, mut bits_len) = (ptr::null_mut(), 0usize);
    assert_eq!(
        unsafe { canfvc_encode(other, rgb.as_ptr(), 16, 16, 1, 4, &mut bits, &mut bits_len) },
        CanfvcStatus::Ok
    );
    let st = unsafe { canfvc_decode(codec, bits, bits_len, &mut out, &mut len, &mut w, &mut hh, &mut n) };
    assert_eq!(st, CanfvcStatus::Bitstream);
    unsafe {
        canfvc_buffer_free(bits, bits_len);
        canfvc_codec_free(other);
        canfvc_codec_free(codec);
        canfvc_codec_free(ptr::null_mut());
        canfvc_buffer_free(ptr::null_mut(), 0);
    }
    assert_eq!(unsafe { canfvc_codec_lambda(ptr::null()) }, 0);
}

#[test]
fn metric_entry_points() {
    let a = [10u8, 20, 30, 40];
    let mut p = 0.0;
    assert_eq!(unsafe { canfvc_psnr_rgb8(a.as_ptr(), a.as_ptr(), 4, &mut p) }, CanfvcStatus::Ok);
    assert!(p.is_infinite());
    let bpp = [0.05, 0.09, 0.16, 0.3];
    let psnr = [30.1, 32.4, 34.6, 36.9];
    let half: Vec<f64> = bpp.iter().map(|b| b / 2.0).collect();
    let mut bd = 0.0;
    let st = unsafe { canfvc_bd_rate(bpp.as_ptr(), psnr.as_ptr(), 4, half.as_ptr(), psnr.as_ptr(), 4, &mut bd) };
    assert_eq!(st, CanfvcStatus::Ok);
    assert!((bd + 50.0).abs() < 0.1, "{bd}");
    let st = unsafe { canfvc_bd_rate(bpp.as_ptr(), psnr.as_ptr(), 3, half.as_ptr(), psnr.as_ptr(), 3, &mut bd) };
    assert_eq!(st, CanfvcStatus::Metric);
    let v = unsafe { CStr::from_ptr(canfvc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("canfvc.h")
}

#[test]
fn generated_header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "typedef struct CanfvcCodec CanfvcCodec;",
        "CANFVC_STATUS_OK = 0",
        "CANFVC_STATUS_PANIC = 10",
        "canfvc_codec_open(",
        "canfvc_codec_new_untrained(",
        "canfvc_codec_free(",
        "canfvc_encode(",
        "canfvc_decode(",
        "canfvc_buffer_free(",
        "canfvc_last_error(",
        "canfvc_psnr_rgb8(",
        "canfvc_bd_rate(",
    ] {
        assert!(text.contains(sym), "missing {sym}");
    }
}

#[test]
fn generated_header_compiles_as_c_and_cpp() {
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(header())
            .output()
        else {
            eprintln!("{compiler} not available; skipped");
            continue;
        };
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
