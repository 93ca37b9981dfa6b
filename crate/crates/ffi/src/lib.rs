//! C ABI over the vesselforge library.
//!
//! Every function returns a [`VfStatus`]. On failure the message is kept per
//! thread and can be copied out with [`vf_last_error`]. Panics are caught at
//! the boundary and reported as `VF_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vesselforge::metrics::roc_curve;
use vesselforge::nn::{param_count, read_params, ModelParams, ModelSpec};
use vesselforge::patch::make_test_grid;
use vesselforge::preprocess::{preprocess_any, PreprocessConfig};
use vesselforge::raster::Raster;
use vesselforge::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    /// Null pointer, zero size or out-of-range argument.
    InvalidArgument = 1,
    /// Bad configuration, stride, element or tiling.
    Config = 2,
    /// Missing or unreadable file.
    Io = 3,
    /// Malformed file contents.
    Format = 4,
    /// Shapes or dimensions do not fit together.
    Shape = 5,
    /// NaN/inf encountered or metric undefined for the input.
    Numerical = 6,
    /// Panic or other unexpected failure.
    Internal = 7,
}

/// Trained network loaded from a weight file.
pub struct VfModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> VfStatus {
    match e {
        Error::Config(_) | Error::InvalidStride(_) | Error::InvalidElement(_) | Error::DegenerateTiling(_) => VfStatus::Config,
        Error::FileNotFound(_) | Error::MissingFiles(_) | Error::Io { .. } | Error::StaleArtifact(_) => VfStatus::Io,
        Error::UnsupportedFormat(_) | Error::CorruptImage(_) | Error::Parse { .. } | Error::Format { .. } => VfStatus::Format,
        Error::WrongChannelCount { .. }
        | Error::DimensionMismatch(_)
        | Error::ShapeMismatch(_)
        | Error::SpatialMismatch(_)
        | Error::OddSpatialDims { .. }
        | Error::PatchLargerThanImage { .. }
        | Error::CountZero { .. }
        | Error::EmptyFov
        | Error::TooFewPatches(_) => VfStatus::Shape,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::DegenerateClasses { .. } => VfStatus::Numerical,
        _ => VfStatus::Internal,
    }
}

enum Fail {
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn arg(msg: &str) -> Fail {
    Fail::Arg(msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VfStatus::Ok
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            VfStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            VfStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| arg("output pointer is null"))
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes;
/// pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trainable parameter count of the network with `base_channels` first-level filters.
///
/// # Safety
/// `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_param_count(base_channels: usize, count: *mut usize) -> VfStatus {
    guard(|| {
        let spec = ModelSpec::with_base(base_channels);
        spec.validate()?;
        *out(count)? = param_count(&spec);
        Ok(())
    })
}

/// Number of patches the strided test grid places on an `image_h`×`image_w` image.
///
/// # Safety
/// `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_test_grid_count(
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
    stride: i64,
    count: *mut usize,
) -> VfStatus {
    guard(|| {
        *out(count)? = make_test_grid(image_h, image_w, patch_h, patch_w, stride)?.count();
        Ok(())
    })
}

/// Default preprocessing (grayscale, negate, top-hat, CLAHE) of an interleaved
/// 8-bit image with 1 or 3 channels. `dst` receives `width * height` bytes.
///
/// # Safety
/// `src` must hold `width * height * channels` bytes and `dst` `width * height`.
#[no_mangle]
pub unsafe extern "C" fn vf_preprocess(src: *const u8, width: usize, height: usize, channels: u8, dst: *mut u8) -> VfStatus {
    guard(|| {
        if channels != 1 && channels != 3 {
            return Err(arg("channels must be 1 or 3"));
        }
        let n = width.checked_mul(height).ok_or_else(|| arg("image size overflows"))?;
        let src = slice(src, n * channels as usize, "src")?;
        let dst = slice_mut(dst, n, "dst")?;
        let img = Raster::new(width, height, channels, src.to_vec())?;
        let prep = preprocess_any(&img, &PreprocessConfig::default())?;
        dst.copy_from_slice(prep.data());
        Ok(())
    })
}

/// Area under the ROC curve of `scores` against binary `labels` (non-zero = vessel).
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; `auc` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vf_roc_auc(scores: *const f32, labels: *const u8, n: usize, auc: *mut f64) -> VfStatus {
    guard(|| {
        let scores = slice(scores, n, "scores")?;
        let labels: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&l| l != 0).collect();
        let (_, area) = roc_curve(scores, &labels)?;
        *out(auc)? = area;
        Ok(())
    })
}

/// Loads a weight file; the architecture is inferred from the tensors it holds.
/// Free the handle with [`vf_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, model: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        let model = out(model)?;
        *model = std::ptr::null_mut();
        if path.is_null() {
            return Err(arg("path is null"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| arg("path is not UTF-8"))?;
        let params = read_params(PathBuf::from(path), None)?;
        *model = Box::into_raw(Box::new(VfModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`vf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// First-level filter count of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `base_channels` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_model_base_channels(model: *const VfModel, base_channels: *mut usize) -> VfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| arg("model is null"))?;
        *out(base_channels)? = m.params.spec().base_channels;
        Ok(())
    })
}

/// Vessel probabilities for a preprocessed single-channel image, computed
/// over a strided grid of `patch`×`patch` tiles. `probs` receives
/// `width * height` values in `[0, 1]`, row-major.
///
/// # Safety
/// `model` must be a live handle, `image` must hold `width * height` bytes and
/// `probs` `width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn vf_model_predict(
    model: *const VfModel,
    image: *const u8,
    width: usize,
    height: usize,
    patch: usize,
    stride: i64,
    probs: *mut f32,
) -> VfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| arg("model is null"))?;
        let n = width.checked_mul(height).ok_or_else(|| arg("image size overflows"))?;
        let image = slice(image, n, "image")?;
        let probs = slice_mut(probs, n, "probs")?;
        let img = Raster::new(width, height, 1, image.to_vec())?;
        let map = vesselforge::metrics::predict_image(&img, &m.params, patch, stride)?;
        probs.copy_from_slice(&map.data);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statuses_follow_error_kinds() {
        assert_eq!(status_of(&Error::InvalidStride(0)), VfStatus::Config);
        assert_eq!(status_of(&Error::FileNotFound("x".into())), VfStatus::Io);
        assert_eq!(status_of(&Error::CountZero { row: 0, col: 0 }), VfStatus::Shape);
        assert_eq!(status_of(&Error::NonFinite("x".into())), VfStatus::Numerical);
    }

    #[test]
    fn panics_are_contained() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, VfStatus::Internal);
        let mut buf = [0 as c_char; 64];
        let n = unsafe { vf_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!(msg, "internal error: boom");
        assert_eq!(n, msg.len());
    }
}
