//! C ABI for the matchpoints detector and registration pipeline.
//!
//! Every function returns an [`MpStatus`]. On failure a message is stored
//! per thread and can be read with [`mp_last_error_message`]. Detectors are
//! opaque handles created by [`mp_detector_load`] and released with
//! [`mp_detector_free`]. Images are passed as row-major `double` arrays with
//! values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use matchpoints::detector::Detector;
use matchpoints::features::{NmsConfig, DESCRIPTOR_LEN};
use matchpoints::geometry::{read_homography, write_homography, Homography};
use matchpoints::imaging::GrayImage;
use matchpoints::net::Checkpoint;
use matchpoints::registration::{violates_failure_rules, RansacConfig};
use matchpoints::rng::indexed_stream;
use matchpoints::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    InvalidArgument = 1,
    Io = 2,
    Format = 3,
    /// The pipeline ran but produced no acceptable homography.
    RegistrationFailed = 4,
    /// The output buffer is smaller than the result; the required size was written.
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque detector handle.
pub struct MpDetector {
    inner: Detector,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpKeypoint {
    pub x: u32,
    pub y: u32,
    pub score: f64,
}

/// Length of one descriptor in doubles.
pub const MP_DESCRIPTOR_LEN: usize = 128;

const _: () = assert!(MP_DESCRIPTOR_LEN == DESCRIPTOR_LEN);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> MpStatus {
    match e {
        Error::InvalidParameter(_) | Error::Dimension(_) => MpStatus::InvalidArgument,
        Error::Io { .. } => MpStatus::Io,
        Error::Parse { .. } | Error::Format(_) | Error::Checkpoint(_) => MpStatus::Format,
        Error::Frame { source, .. } => status_of(source),
        _ => MpStatus::Internal,
    }
}

fn fail(status: MpStatus, msg: impl Into<String>) -> MpStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MpStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

fn guarded(f: impl FnOnce() -> MpStatus) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == MpStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(MpStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, MpStatus> {
    if p.is_null() {
        return Err(fail(MpStatus::InvalidArgument, "null path"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(MpStatus::InvalidArgument, "path is not UTF-8")),
    }
}

/// # Safety
/// `pixels` must point to `width * height` readable doubles.
unsafe fn image_arg(pixels: *const f64, width: usize, height: usize) -> Result<GrayImage, MpStatus> {
    if pixels.is_null() || width == 0 || height == 0 {
        return Err(fail(MpStatus::InvalidArgument, "null or empty image"));
    }
    let Some(n) = width.checked_mul(height) else {
        return Err(fail(MpStatus::InvalidArgument, "image too large"));
    };
    let data = std::slice::from_raw_parts(pixels, n).to_vec();
    GrayImage::from_pixels(width, height, data).map_err(from_error)
}

fn rows_to_flat(h: &Homography) -> [f64; 9] {
    let r = h.rows();
    [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]]
}

/// Message of the last failed call on this thread (empty after success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a detector from a checkpoint with default NMS settings.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mp_detector_load(path: *const c_char, out: *mut *mut MpDetector) -> MpStatus {
    guarded(|| {
        if out.is_null() {
            return fail(MpStatus::InvalidArgument, "null output pointer");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Checkpoint::load(&path) {
            Ok(ck) => {
                let det = MpDetector {
                    inner: Detector::new(ck.net, NmsConfig::default()),
                };
                *out = Box::into_raw(Box::new(det));
                MpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `det` must be null or a handle from [`mp_detector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_detector_free(det: *mut MpDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Sets the NMS radius, score threshold and keypoint budget.
///
/// # Safety
/// `det` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mp_detector_set_nms(
    det: *mut MpDetector,
    window: usize,
    threshold: f64,
    max_keypoints: usize,
) -> MpStatus {
    guarded(|| {
        let Some(d) = det.as_mut() else {
            return fail(MpStatus::InvalidArgument, "null detector");
        };
        if !threshold.is_finite() {
            return fail(MpStatus::InvalidArgument, "threshold must be finite");
        }
        d.inner.nms = NmsConfig {
            window,
            threshold,
            max_keypoints,
        };
        MpStatus::Ok
    })
}

/// Detects and describes keypoints. `out_count` receives the number found.
/// When `capacity` is too small nothing else is written and
/// `BufferTooSmall` is returned. `out_descriptors` may be null; otherwise
/// it must hold `capacity * MP_DESCRIPTOR_LEN` doubles.
///
/// # Safety
/// All pointers must be valid for the sizes given.
#[no_mangle]
pub unsafe extern "C" fn mp_detect(
    det: *const MpDetector,
    pixels: *const f64,
    width: usize,
    height: usize,
    out_keypoints: *mut MpKeypoint,
    out_descriptors: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> MpStatus {
    guarded(|| {
        let Some(d) = det.as_ref() else {
            return fail(MpStatus::InvalidArgument, "null detector");
        };
        if out_count.is_null() || (out_keypoints.is_null() && capacity > 0) {
            return fail(MpStatus::InvalidArgument, "null output pointer");
        }
        let img = match image_arg(pixels, width, height) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let found = match d.inner.detect(&img) {
            Ok(f) => f,
            Err(e) => return from_error(e),
        };
        let n = found.keypoints.len();
        *out_count = n;
        if n > capacity {
            return fail(MpStatus::BufferTooSmall, format!("{n} keypoints, capacity {capacity}"));
        }
        for (i, (k, desc)) in found.keypoints.iter().zip(&found.descriptors).enumerate() {
            *out_keypoints.add(i) = MpKeypoint {
                x: k.x as u32,
                y: k.y as u32,
                score: k.score,
            };
            if !out_descriptors.is_null() {
                let dst = std::slice::from_raw_parts_mut(out_descriptors.add(i * DESCRIPTOR_LEN), DESCRIPTOR_LEN);
                dst.copy_from_slice(&desc.0);
            }
        }
        MpStatus::Ok
    })
}

/// Estimates the homography mapping image A onto image B (row-major into
/// `out_h[9]`). `out_inliers` may be null. Returns `RegistrationFailed`
/// when no model is found or the model breaks the flip/scale rules.
///
/// # Safety
/// Image pointers must hold `width * height` doubles; `out_h` must hold 9.
#[no_mangle]
pub unsafe extern "C" fn mp_register(
    det: *const MpDetector,
    a_pixels: *const f64,
    a_width: usize,
    a_height: usize,
    b_pixels: *const f64,
    b_width: usize,
    b_height: usize,
    seed: u64,
    out_h: *mut f64,
    out_inliers: *mut usize,
) -> MpStatus {
    guarded(|| {
        let Some(d) = det.as_ref() else {
            return fail(MpStatus::InvalidArgument, "null detector");
        };
        if out_h.is_null() {
            return fail(MpStatus::InvalidArgument, "null output pointer");
        }
        let a = match image_arg(a_pixels, a_width, a_height) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let b = match image_arg(b_pixels, b_width, b_height) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let mut rng = indexed_stream(seed, "ransac", 0);
        let reg = match d.inner.register(&a, &b, &RansacConfig::default(), &mut rng) {
            Ok(r) => r,
            Err(e) => return from_error(e),
        };
        match reg.estimate {
            Some((h, inliers)) if !violates_failure_rules(&h) => {
                std::slice::from_raw_parts_mut(out_h, 9).copy_from_slice(&rows_to_flat(&h));
                if !out_inliers.is_null() {
                    *out_inliers = inliers.len();
                }
                MpStatus::Ok
            }
            _ => fail(MpStatus::RegistrationFailed, "registration failed"),
        }
    })
}

/// Reads a nine-number homography file into `out_h[9]`.
///
/// # Safety
/// `path` must be NUL-terminated; `out_h` must hold 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn mp_homography_read(path: *const c_char, out_h: *mut f64) -> MpStatus {
    guarded(|| {
        if out_h.is_null() {
            return fail(MpStatus::InvalidArgument, "null output pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_homography(&path) {
            Ok(h) => {
                std::slice::from_raw_parts_mut(out_h, 9).copy_from_slice(&rows_to_flat(&h));
                MpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Writes `h[9]` (row-major) as a homography file.
///
/// # Safety
/// `path` must be NUL-terminated; `h` must hold 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn mp_homography_write(path: *const c_char, h: *const f64) -> MpStatus {
    guarded(|| {
        if h.is_null() {
            return fail(MpStatus::InvalidArgument, "null homography");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let v = std::slice::from_raw_parts(h, 9);
        let rows = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
        match Homography::from_rows(rows).and_then(|h| write_homography(&path, &h)) {
            Ok(()) => MpStatus::Ok,
            Err(Error::NonInvertible) => fail(MpStatus::InvalidArgument, "non-invertible transform"),
            Err(e) => from_error(e),
        }
    })
}
