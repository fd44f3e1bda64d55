//! C ABI over the `clmammo` library.
//!
//! Every fallible function returns a [`ClmStatus`]; on failure the message is
//! kept per thread and can be read with [`clm_last_error`]. Models are opaque
//! handles created by [`clm_model_load`] and released by [`clm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use clmammo::augment::AugmentConfig;
use clmammo::config::RunConfig;
use clmammo::data::{GrayImage, Label};
use clmammo::explain::{gradcam, TargetClass, Upsample};
use clmammo::loss::batch_loss_value;
use clmammo::metrics::roc_auc;
use clmammo::model::NUM_CLASSES;
use clmammo::optim::{lr_at, ScheduleConfig};
use clmammo::train::{
    embed_images, load_checkpoint, malignant_probability, prepare_batch, INFERENCE_CHUNK,
};
use clmammo::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Loaded model plus the preprocessing it was trained with.
pub struct ClmModel {
    model: clmammo::model::Model,
    augment: AugmentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> ClmStatus {
    match e {
        Error::File { .. } | Error::Io(_) => ClmStatus::Io,
        Error::Checkpoint { .. } | Error::Fingerprint { .. } | Error::Json(_) => {
            ClmStatus::Checkpoint
        }
        Error::NonFinite(_) => ClmStatus::NonFinite,
        _ => ClmStatus::InvalidArgument,
    }
}

struct Fail(ClmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ClmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ClmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ClmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn model_ref<'a>(m: *const ClmModel) -> Result<&'a ClmModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image(pixels: *const f32, width: usize, height: usize) -> Result<GrayImage, Fail> {
    let len = width
        .checked_mul(height)
        .ok_or_else(|| Fail(ClmStatus::InvalidArgument, "image too large".into()))?;
    if len == 0 {
        return Err(Fail(
            ClmStatus::InvalidArgument,
            "image has no pixels".into(),
        ));
    }
    Ok(GrayImage::new(
        width,
        height,
        slice(pixels, len, "pixels")?.to_vec(),
    )?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length excluding NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn clm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn clm_model_load(path: *const c_char, out: *mut *mut ClmModel) -> ClmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(ClmStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = load_checkpoint(Path::new(path))?;
        let augment = RunConfig::from_json(&ckpt.config)
            .and_then(|c| c.augment())
            .unwrap_or_default();
        *out = Box::into_raw(Box::new(ClmModel {
            model: ckpt.model,
            augment,
        }));
        Ok(())
    })
}

/// Release a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`clm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clm_model_free(model: *mut ClmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Encoder feature dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clm_model_feature_dim(model: *const ClmModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.config.encoder.feature_dim())
}

/// Eval-mode features of one row-major image with pixels in `[0, 1]`.
/// `out` receives `clm_model_feature_dim` floats.
///
/// # Safety
/// `pixels` must hold `width * height` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn clm_model_embed(
    model: *const ClmModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut f32,
    out_len: usize,
) -> ClmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let dim = m.model.config.encoder.feature_dim();
        if out_len < dim {
            return Err(Fail(
                ClmStatus::BufferTooSmall,
                format!("output holds {out_len} floats, need {dim}"),
            ));
        }
        let img = image(pixels, width, height)?;
        let feats = embed_images(&m.model, &[&img], &m.augment)?;
        slice_mut(out, out_len, "out")?[..dim].copy_from_slice(feats.data());
        Ok(())
    })
}

/// Class logits (benign, malignant) and the malignant probability.
///
/// # Safety
/// `pixels` must hold `width * height` floats, `logits` two floats and
/// `probability` one double; `logits` and `probability` may be null.
#[no_mangle]
pub unsafe extern "C" fn clm_model_classify(
    model: *const ClmModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    logits: *mut f32,
    probability: *mut f64,
) -> ClmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image(pixels, width, height)?;
        let out = m
            .model
            .predict_logits(&prepare_batch(&[&img], &m.augment)?, INFERENCE_CHUNK)?;
        if !logits.is_null() {
            slice_mut(logits, NUM_CLASSES, "logits")?.copy_from_slice(out.data());
        }
        if let Some(p) = probability.as_mut() {
            *p = malignant_probability(out.data());
        }
        Ok(())
    })
}

/// Grad-CAM heatmap at image resolution. `target_class < 0` explains the
/// predicted class; the explained class is written to `out_class`.
///
/// # Safety
/// `pixels` and `heatmap` must each hold `width * height` floats;
/// `out_class` may be null.
#[no_mangle]
pub unsafe extern "C" fn clm_model_gradcam(
    model: *const ClmModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    target_class: i32,
    heatmap: *mut f32,
    out_class: *mut usize,
) -> ClmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image(pixels, width, height)?;
        let target = if target_class < 0 {
            TargetClass::Predicted
        } else {
            TargetClass::Class(target_class as usize)
        };
        let e = gradcam(&m.model, &img, &m.augment, target, Upsample::Bilinear)?;
        slice_mut(heatmap, width * height, "heatmap")?.copy_from_slice(&e.heatmap.values);
        if let Some(c) = out_class.as_mut() {
            *c = e.heatmap.target_class;
        }
        Ok(())
    })
}

/// Area under the ROC curve; labels are 0 (benign) or 1 (malignant).
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; `out` one double.
#[no_mangle]
pub unsafe extern "C" fn clm_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> ClmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let labels = slice(labels, n, "labels")?
            .iter()
            .map(|&l| Label::from_index(l as usize))
            .collect::<clmammo::Result<Vec<_>>>()?;
        *out = roc_auc(slice(scores, n, "scores")?, &labels)?.1;
        Ok(())
    })
}

/// Mean contrastive loss over a `[rows, dim]` batch of unit-norm rows whose
/// rows `2k` and `2k+1` are positive pairs.
///
/// # Safety
/// `z` must hold `rows * dim` floats; `out` one double.
#[no_mangle]
pub unsafe extern "C" fn clm_nt_xent(
    z: *const f32,
    rows: usize,
    dim: usize,
    tau: f64,
    out: *mut f64,
) -> ClmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let len = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(ClmStatus::InvalidArgument, "batch too large".into()))?;
        let t = Tensor::new(&[rows, dim], slice(z, len, "z")?.to_vec())?;
        *out = batch_loss_value(&t, tau)?;
        Ok(())
    })
}

/// Warmup + cosine learning rate at `step`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn clm_lr_at(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    base_lr: f64,
    final_lr: f64,
    out: *mut f64,
) -> ClmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lr_at(
            step,
            &ScheduleConfig {
                warmup_steps,
                total_steps,
                base_lr,
                final_lr,
            },
        )?;
        Ok(())
    })
}
