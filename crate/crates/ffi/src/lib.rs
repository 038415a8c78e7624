//! C ABI for stimkit.
//!
//! Every function returns a [`StimkitStatus`]; on failure a message is kept in
//! thread-local storage and can be read with [`stimkit_last_error`]. Panics
//! never cross the boundary. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stimkit::image::GrayImage;
use stimkit::neural::{Model, ModelCheckpoint};
use stimkit::optical_flow::{farneback_dense, lucas_kanade_grid, FarnebackParams, FlowField, LucasKanadeParams};
use stimkit::pipeline::{windows_from_heads, PipelineSettings};
use stimkit::pose_features::{filter_head, load_keypoints, rasterize, ClipRecord, FrameSize, Label, RasterClip};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimkitStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Parse = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Io = 7,
    Config = 8,
    /// The output buffer is too small; the required count was written.
    BufferTooSmall = 9,
    Panic = 10,
}

/// A trained model with the preprocessing settings it was trained with.
pub struct StimkitModel {
    model: Model<f32>,
    pipeline: PipelineSettings,
}

/// An optical-flow field: parallel sample points, vectors and validity flags.
pub struct StimkitFlow {
    field: FlowField,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(StimkitStatus, String);

impl From<stimkit::Error> for Failure {
    fn from(e: stimkit::Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn status_of(e: &stimkit::Error) -> StimkitStatus {
    use stimkit::Error as E;
    match e {
        E::Parse { .. } | E::Schema { .. } => StimkitStatus::Parse,
        E::Format(_) => StimkitStatus::Format,
        E::Shape(_) | E::Size(_) => StimkitStatus::Shape,
        E::Numeric(_) => StimkitStatus::Numeric,
        E::Io { .. } => StimkitStatus::Io,
        E::Config { .. } => StimkitStatus::Config,
        E::Fold { source, .. } => status_of(source),
        _ => StimkitStatus::InvalidArgument,
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StimkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            StimkitStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {message}"));
            StimkitStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(StimkitStatus::NullArgument, format!("`{name}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(StimkitStatus::InvalidArgument, message.into())
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn gray_arg(data: *const f32, width: usize, height: usize, name: &str) -> Result<GrayImage, Failure> {
    if data.is_null() {
        return Err(null(name));
    }
    let len = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid("image dimensions must be positive"))?;
    let pixels = std::slice::from_raw_parts(data, len).to_vec();
    Ok(GrayImage::from_vec(width, height, pixels)?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stimkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next stimkit call on the same thread.
#[no_mangle]
pub extern "C" fn stimkit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn model_from(ck: ModelCheckpoint) -> Result<Box<StimkitModel>, Failure> {
    let pipeline = ck.training_metadata.pipeline.unwrap_or_default();
    Ok(Box::new(StimkitModel {
        model: ck.model()?,
        pipeline,
    }))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_load(path: *const c_char, out: *mut *mut StimkitModel) -> StimkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        *out = Box::into_raw(model_from(ModelCheckpoint::load(&path)?)?);
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_load_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut StimkitModel,
) -> StimkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        *out = Box::into_raw(model_from(ModelCheckpoint::from_bytes(bytes, "<memory>")?)?);
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from a `stimkit_model_load*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_free(model: *mut StimkitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frames, height and width of one model input window.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_input_shape(
    model: *const StimkitModel,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> StimkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if frames.is_null() || height.is_null() || width.is_null() {
            return Err(null("frames/height/width"));
        }
        let i = &m.model.config().input;
        *frames = i.frames;
        *height = i.height;
        *width = i.width;
        Ok(())
    })
}

/// Probability for one rasterized window: `frames * height * width` floats,
/// frame-major then row-major.
///
/// # Safety
/// `data` must point to `len` floats; `probability` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_predict_raster(
    model: *const StimkitModel,
    data: *const f32,
    len: usize,
    probability: *mut f64,
) -> StimkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if data.is_null() {
            return Err(null("data"));
        }
        if probability.is_null() {
            return Err(null("probability"));
        }
        let i = &m.model.config().input;
        let per_frame = i.height * i.width;
        if len != i.frames * per_frame {
            return Err(Failure(
                StimkitStatus::Shape,
                format!("expected {} floats ({}x{}x{}), got {len}", i.frames * per_frame, i.frames, i.height, i.width),
            ));
        }
        let all = std::slice::from_raw_parts(data, len);
        let frames = all
            .chunks_exact(per_frame)
            .map(|c| GrayImage::from_vec(i.width, i.height, c.to_vec()))
            .collect::<stimkit::Result<Vec<_>>>()?;
        let clip = RasterClip {
            frames,
            label: Label::Negative,
            subject_id: String::new(),
        };
        *probability = m.model.predict_clip(&clip)?;
        Ok(())
    })
}

/// Runs the full keypoint pipeline on one clip (a consolidated keypoint file
/// or a per-frame directory) with the model's training-time settings.
///
/// Writes one probability per window, and its first frame index when
/// `origins` is not null. `count` receives the number of windows; when it
/// exceeds `capacity` nothing is written and `BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `path` must be NUL-terminated; `probabilities` (and `origins` if given)
/// must hold `capacity` elements; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_model_predict_keypoints(
    model: *const StimkitModel,
    path: *const c_char,
    frame_width: f64,
    frame_height: f64,
    probabilities: *mut f64,
    origins: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> StimkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if count.is_null() {
            return Err(null("count"));
        }
        *count = 0;
        let path = path_arg(path, "path")?;
        if !(frame_width > 0.0 && frame_height > 0.0 && frame_width.is_finite() && frame_height.is_finite()) {
            return Err(invalid("frame size must be positive"));
        }
        let frames = load_keypoints(&path)?;
        if frames.is_empty() {
            return Ok(());
        }
        let heads: Vec<_> = frames
            .iter()
            .map(|f| filter_head(f, m.pipeline.confidence_threshold))
            .collect();
        let clip = ClipRecord {
            clip_id: path.display().to_string(),
            subject_id: String::new(),
            label: Label::Negative,
            fps: 30.0,
            keypoint_source: path,
            frame_range: (0, frames.len() - 1),
        };
        let size = FrameSize {
            width: frame_width,
            height: frame_height,
        };
        let windows = windows_from_heads(&clip, size, &heads, &m.pipeline)?.windows;
        *count = windows.len();
        if windows.len() > capacity {
            return Err(Failure(
                StimkitStatus::BufferTooSmall,
                format!("{} windows, capacity {capacity}", windows.len()),
            ));
        }
        if windows.is_empty() {
            return Ok(());
        }
        if probabilities.is_null() {
            return Err(null("probabilities"));
        }
        for (k, w) in windows.iter().enumerate() {
            *probabilities.add(k) = m.model.predict_clip(&rasterize(w, &m.pipeline.raster))?;
            if !origins.is_null() {
                *origins.add(k) = w.origin_frame;
            }
        }
        Ok(())
    })
}

unsafe fn flow_out(out: *mut *mut StimkitFlow, f: impl FnOnce() -> Result<FlowField, Failure>) -> StimkitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let field = f()?;
        *out = Box::into_raw(Box::new(StimkitFlow { field }));
        Ok(())
    })
}

/// Sparse Lucas-Kanade flow on a lattice with the given spacing. Images are
/// `width * height` row-major intensities in [0, 1].
///
/// # Safety
/// `prev` and `next` must hold `width * height` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_flow_lucas_kanade(
    prev: *const f32,
    next: *const f32,
    width: usize,
    height: usize,
    spacing: usize,
    out: *mut *mut StimkitFlow,
) -> StimkitStatus {
    flow_out(out, || {
        if spacing == 0 {
            return Err(invalid("spacing must be at least 1"));
        }
        let a = gray_arg(prev, width, height, "prev")?;
        let b = gray_arg(next, width, height, "next")?;
        let params = LucasKanadeParams {
            spacing,
            ..Default::default()
        };
        Ok(lucas_kanade_grid(&a, &b, &params)?)
    })
}

/// Dense Farneback flow with default parameters.
///
/// # Safety
/// `prev` and `next` must hold `width * height` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_flow_farneback(
    prev: *const f32,
    next: *const f32,
    width: usize,
    height: usize,
    out: *mut *mut StimkitFlow,
) -> StimkitStatus {
    flow_out(out, || {
        let a = gray_arg(prev, width, height, "prev")?;
        let b = gray_arg(next, width, height, "next")?;
        Ok(farneback_dense(&a, &b, &FarnebackParams::default())?)
    })
}

/// Number of sample points; 0 for null.
///
/// # Safety
/// `flow` must be null or a live flow handle.
#[no_mangle]
pub unsafe extern "C" fn stimkit_flow_len(flow: *const StimkitFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.field.len())
}

/// Reads sample point `index`: its position, displacement and validity (0/1).
///
/// # Safety
/// `flow` must be a live handle and the output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn stimkit_flow_get(
    flow: *const StimkitFlow,
    index: usize,
    x: *mut f64,
    y: *mut f64,
    u: *mut f64,
    v: *mut f64,
    valid: *mut u8,
) -> StimkitStatus {
    guard(|| {
        let f = &flow.as_ref().ok_or_else(|| null("flow"))?.field;
        if x.is_null() || y.is_null() || u.is_null() || v.is_null() || valid.is_null() {
            return Err(null("x/y/u/v/valid"));
        }
        if index >= f.len() {
            return Err(invalid(format!("index {index} out of range for {} points", f.len())));
        }
        (*x, *y) = f.points[index];
        (*u, *v) = f.vectors[index];
        *valid = f.valid[index] as u8;
        Ok(())
    })
}

/// Releases a flow field; null is ignored.
///
/// # Safety
/// `flow` must come from a `stimkit_flow_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stimkit_flow_free(flow: *mut StimkitFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}
