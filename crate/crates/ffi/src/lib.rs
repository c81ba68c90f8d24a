//! C ABI over `i2c-core`: load a checkpoint, classify an image, and extract
//! the localization box of a class.
//!
//! Every fallible call returns an [`I2cStatus`]; on failure the message is
//! available from [`i2c_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use i2c_core::checkpoint::Checkpoint;
use i2c_core::engine::Tensor;
use i2c_core::eval::{for_each_sample_maps, iou};
use i2c_core::locmap::{box_from_map, BBox};
use i2c_core::model::{ModelConfig, ModelParams};
use i2c_core::synthdata::Sample;
use i2c_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum I2cStatus {
    Ok = 0,
    /// Null pointer or bad buffer length.
    InvalidArgument = 1,
    /// Configuration, input or bounds error.
    Config = 2,
    /// Malformed file or I/O failure.
    Format = 3,
    Numeric = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

/// Half-open pixel box `[x1, x2) x [y1, y2)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct I2cBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

/// Opaque model handle.
pub struct I2cModel {
    config: ModelConfig,
    params: ModelParams,
}

/// Passed as `class_id` to localize the predicted class.
pub const I2C_PREDICTED_CLASS: u32 = u32::MAX;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> I2cStatus {
    match e {
        Error::Usage(_) => I2cStatus::InvalidArgument,
        Error::Config(_) | Error::Input(_) | Error::Bounds { .. } => I2cStatus::Config,
        Error::Format { .. } | Error::Io { .. } => I2cStatus::Format,
        Error::Numeric(_) => I2cStatus::Numeric,
    }
}

fn invalid(msg: &str) -> Error {
    Error::Usage(msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> I2cStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => I2cStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            I2cStatus::Internal
        }
    }
}

impl I2cModel {
    /// HWC floats to a `[3,H,W]` sample.
    fn sample(&self, image: *const f32, len: usize) -> Result<Sample, Error> {
        let s = self.config.input_size;
        if image.is_null() {
            return Err(invalid("image is null"));
        }
        if len != s * s * 3 {
            return Err(invalid(&format!("image has {len} values, expected {s}x{s}x3 = {}", s * s * 3)));
        }
        let hwc = unsafe { std::slice::from_raw_parts(image, len) };
        let mut chw = vec![0.0; len];
        for (i, px) in hwc.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                chw[c * s * s + i] = v as f64;
            }
        }
        Ok(Sample {
            image: Tensor::new(&[3, s, s], chw)?,
            label: 0,
            gt_boxes: Vec::new(),
            sample_id: 0,
        })
    }
}

/// Loads a checkpoint. `input_size` is the square image side; `stride_total`
/// is the map downsampling factor the model was trained with.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_load(
    path: *const c_char,
    input_size: u32,
    stride_total: u32,
    out: *mut *mut I2cModel,
) -> I2cStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let config = ck.infer_config(input_size as usize, stride_total as usize)?;
        let params = ck.params(&config)?;
        *out = Box::into_raw(Box::new(I2cModel { config, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`i2c_model_load`] and not be freed already; null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_free(model: *mut I2cModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_num_classes(model: *const I2cModel) -> u32 {
    model.as_ref().map_or(0, |m| m.config.num_classes as u32)
}

/// Image side length, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_input_size(model: *const I2cModel) -> u32 {
    model.as_ref().map_or(0, |m| m.config.input_size as u32)
}

/// Class logits of one HWC image (`input_size * input_size * 3` floats).
///
/// # Safety
/// `image` must hold `image_len` floats and `logits` `logits_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_predict(
    model: *const I2cModel,
    image: *const f32,
    image_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> I2cStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if logits.is_null() || logits_len != m.config.num_classes {
            return Err(invalid(&format!("logits buffer must hold {} values", m.config.num_classes)));
        }
        let sample = m.sample(image, image_len)?;
        let out = std::slice::from_raw_parts_mut(logits, logits_len);
        for_each_sample_maps(&m.config, &m.params, std::slice::from_ref(&sample), |_, sm| {
            out.copy_from_slice(&sm.logits);
            Ok(())
        })
    })
}

/// Box of `class_id` (or the top-scoring class for [`I2C_PREDICTED_CLASS`])
/// at threshold `tau`. `*found` is 0 when no pixel reaches the threshold,
/// in which case `*box_out` is zeroed. `class_out` may be null.
///
/// # Safety
/// Buffers as in [`i2c_model_predict`]; `box_out` and `found` must be valid.
#[no_mangle]
pub unsafe extern "C" fn i2c_model_localize(
    model: *const I2cModel,
    image: *const f32,
    image_len: usize,
    class_id: u32,
    tau: f64,
    box_out: *mut I2cBox,
    found: *mut i32,
    class_out: *mut u32,
) -> I2cStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if box_out.is_null() || found.is_null() {
            return Err(invalid("null output pointer"));
        }
        if class_id != I2C_PREDICTED_CLASS && class_id as usize >= m.config.num_classes {
            return Err(Error::Config(format!(
                "class {class_id} out of range for {} classes",
                m.config.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
        }
        let sample = m.sample(image, image_len)?;
        let mut result = (None, 0usize);
        for_each_sample_maps(&m.config, &m.params, std::slice::from_ref(&sample), |_, sm| {
            let class = if class_id == I2C_PREDICTED_CLASS {
                i2c_core::eval::top_k(&sm.logits, 1)[0]
            } else {
                class_id as usize
            };
            result = (box_from_map(&sm.maps[class], tau)?, class);
            Ok(())
        })?;
        let (b, class) = result;
        *found = b.is_some() as i32;
        *box_out = b.map_or(I2cBox::default(), |b| I2cBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        });
        if !class_out.is_null() {
            *class_out = class as u32;
        }
        Ok(())
    })
}

/// Intersection over union of two non-empty boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn i2c_iou(a: *const I2cBox, b: *const I2cBox, out: *mut f64) -> I2cStatus {
    guard(|| {
        let (a, b) = match (a.as_ref(), b.as_ref()) {
            (Some(a), Some(b)) if !out.is_null() => (a, b),
            _ => return Err(invalid("null argument")),
        };
        let a = BBox::new(a.x1, a.y1, a.x2, a.y2)?;
        let b = BBox::new(b.x1, b.y1, b.x2, b.y2)?;
        *out = iou(&a, &b)?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn i2c_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn i2c_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
