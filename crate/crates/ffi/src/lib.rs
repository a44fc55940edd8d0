//! C ABI over the relguide toolkit.
//!
//! Every fallible function returns an [`RgStatus`]; on failure the message is
//! available from [`rg_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use relguide::data::{load_dataset, LabeledSample, Mask};
use relguide::lrp::{lrp, LrpRules};
use relguide::network::{load_weights, save_weights, Model, ModelConfig};
use relguide::training::{tumor_lrp_score, ScoreVariant};
use relguide::{Error, Tensor};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    Usage = 1,
    Config = 2,
    Format = 3,
    Io = 4,
    Dimension = 5,
    Numerical = 6,
    Score = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<&Error> for RgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Usage(_) => RgStatus::Usage,
            Error::Config(_) => RgStatus::Config,
            Error::Format { .. } => RgStatus::Format,
            Error::Io { .. } => RgStatus::Io,
            Error::Dimension(_) => RgStatus::Dimension,
            Error::Numerical(_) => RgStatus::Numerical,
            Error::Score(_) => RgStatus::Score,
        }
    }
}

/// A classifier with its architecture.
pub struct RgModel {
    model: Model,
}

/// A loaded labeled dataset.
pub struct RgDataset {
    samples: Vec<LabeledSample>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(RgStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RgStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RgStatus::Usage, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const RgModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

unsafe fn model_config(json: *const c_char) -> Result<ModelConfig, Failure> {
    if json.is_null() {
        return Ok(ModelConfig::default());
    }
    let s = text(json, "config")?;
    serde_json::from_str(s).map_err(|e| Failure(RgStatus::Config, format!("model config: {e}")))
}

unsafe fn input_tensor(m: &Model, input: *const f32, len: usize) -> Result<Tensor, Failure> {
    let data = slice(input, len, "input")?;
    let shape = m.input_shape();
    Ok(Tensor::new(&shape, data.to_vec())?)
}

fn copy_out(src: &[f32], dst: &mut [f32]) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(Failure(
            RgStatus::Dimension,
            format!("output buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialized model. `config_json` may be null for the default
/// architecture.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rg_model_new(config_json: *const c_char, seed: u64, out: *mut *mut RgModel) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Model::from_config(&model_config(config_json)?, seed)?;
        *out = Box::into_raw(Box::new(RgModel { model }));
        Ok(())
    })
}

/// Loads weights saved for the architecture described by `config_json`
/// (null for the default).
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rg_model_load(config_json: *const c_char, path: *const c_char, out: *mut *mut RgModel) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = model_config(config_json)?;
        let path = PathBuf::from(text(path, "path")?);
        let model = load_weights(&path, cfg.input_shape, cfg.layers())?;
        *out = Box::into_raw(Box::new(RgModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rg_model_save(model: *const RgModel, path: *const c_char) -> RgStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_weights(m, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_model_free(model: *mut RgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input values (C·H·W), or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rg_model_input_len(model: *const RgModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.input_shape().iter().product())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rg_model_classes(model: *const RgModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.classes())
}

/// Inference-mode logits into `logits[0..logits_len]`.
///
/// # Safety
/// Buffers hold at least the given number of elements.
#[no_mangle]
pub unsafe extern "C" fn rg_model_forward(
    model: *const RgModel,
    input: *const f32,
    input_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> RgStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input_tensor(m, input, input_len)?;
        let out = m.forward(&x)?;
        copy_out(out.data(), slice_mut(logits, logits_len, "logits")?)
    })
}

/// # Safety
/// `input` holds `input_len` values; `class_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rg_model_predict(model: *const RgModel, input: *const f32, input_len: usize, class_out: *mut usize) -> RgStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input_tensor(m, input, input_len)?;
        let class = m.predict(&x)?;
        *class_out.as_mut().ok_or_else(|| null("class_out"))? = class;
        Ok(())
    })
}

/// Input relevance of the `target` logit. `rule` is "epsilon", "alphabeta"
/// or "composite" (null means composite). Writes C·H·W values.
///
/// # Safety
/// Buffers hold at least the given number of elements; `rule` is null or
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rg_lrp(
    model: *const RgModel,
    input: *const f32,
    input_len: usize,
    target: usize,
    rule: *const c_char,
    relevance: *mut f32,
    relevance_len: usize,
) -> RgStatus {
    guard(|| {
        let m = model_ref(model)?;
        let rules = if rule.is_null() {
            LrpRules::default()
        } else {
            LrpRules::preset(text(rule, "rule")?)?
        };
        let x = input_tensor(m, input, input_len)?;
        let map = lrp(m, &x, target, &rules)?;
        copy_out(map.input().data(), slice_mut(relevance, relevance_len, "relevance")?)
    })
}

/// Share of positive relevance on the lesion versus the rest of the object.
/// `relevance` is `[channels, height, width]`; masks are `height·width`
/// bytes of 0 or 1.
///
/// # Safety
/// Buffers hold the implied number of elements; `score_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rg_tumor_lrp_score(
    relevance: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    lesion: *const u8,
    object: *const u8,
    area_normalized: bool,
    floor: f32,
    score_out: *mut f32,
) -> RgStatus {
    guard(|| {
        let n = height * width;
        let rel = Tensor::new(&[channels, height, width], slice(relevance, channels * n, "relevance")?.to_vec())?;
        let lesion = Mask::new(height, width, slice(lesion, n, "lesion")?.to_vec())?;
        let object = Mask::new(height, width, slice(object, n, "object")?.to_vec())?;
        let variant = if area_normalized {
            ScoreVariant::AreaNormalized
        } else {
            ScoreVariant::Unnormalized
        };
        let s = tumor_lrp_score(&rel, &lesion, &object, variant, floor)?;
        *score_out.as_mut().ok_or_else(|| null("score_out"))? = s;
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rg_dataset_load(path: *const c_char, out: *mut *mut RgDataset) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let samples = load_dataset(&PathBuf::from(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(RgDataset { samples }));
        Ok(())
    })
}

/// # Safety
/// `dataset` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rg_dataset_free(dataset: *mut RgDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rg_dataset_len(dataset: *const RgDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.samples.len())
}

/// Copies sample `index`: its image (C·H·W values) and, when the pointers
/// are non-null, its id and label.
///
/// # Safety
/// `image` holds `image_len` values; `id_out` and `label_out` are null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rg_dataset_sample(
    dataset: *const RgDataset,
    index: usize,
    image: *mut f32,
    image_len: usize,
    id_out: *mut u32,
    label_out: *mut u8,
) -> RgStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let s = d.samples.get(index).ok_or_else(|| {
            Failure(
                RgStatus::Usage,
                format!("index {index} out of range for {} samples", d.samples.len()),
            )
        })?;
        copy_out(s.image.data(), slice_mut(image, image_len, "image")?)?;
        if let Some(id) = id_out.as_mut() {
            *id = s.id;
        }
        if let Some(label) = label_out.as_mut() {
            *label = s.label;
        }
        Ok(())
    })
}
