//! C ABI over `grid-core`.
//!
//! Conventions:
//! - every fallible function returns a [`GridStatus`]; on failure the message
//!   is available from [`grid_last_error`] on the same thread;
//! - arrays are caller-owned, contiguous, row-major `double` buffers with an
//!   explicit length; frame sequences are laid out `(frame, y, x, channel)`
//!   and grids `(y, x, channel)`;
//! - models are opaque handles released with [`grid_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use grid_core::backbone::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use grid_core::condition::{Condition, Label};
use grid_core::curriculum::{alpha_at, AlphaSchedule};
use grid_core::error::{Error, ErrorClass};
use grid_core::flow::{base_loss, flow_loss};
use grid_core::layout::{pack, unpack, Frame, GridTensor, LayoutSpec};
use grid_core::metrics::{psnr, ssim};
use grid_core::sampler::{init_grid, sample, InitMode, MaskMode, SamplerConfig};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStatus {
    Ok = 0,
    NullPointer = 1,
    /// Invalid configuration or arguments.
    Config = 2,
    /// Bad input data, shapes, or files.
    Data = 3,
    Numerical = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GridModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridInitMode {
    Free = 0,
    Expansion = 1,
    Interpolation = 2,
    Restoration = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GridSamplerConfig {
    pub noise_level: f64,
    pub steps: usize,
    pub guidance_scale: f64,
    /// Reference cells follow the noised forward path instead of staying clean.
    pub trajectory_consistent: bool,
    pub seed: u64,
    pub allow_degenerate: bool,
}

/// Opaque model handle.
pub struct GridModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> GridStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GridStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            GridStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            match e.class() {
                ErrorClass::Config => GridStatus::Config,
                ErrorClass::Data => GridStatus::Data,
                ErrorClass::Numerical => GridStatus::Numerical,
            }
        }
        Err(_) => {
            set_error("internal panic");
            GridStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::Config("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn layout_of(l: &GridLayout) -> Result<LayoutSpec, Fail> {
    Ok(LayoutSpec::new(l.rows, l.cols, l.frame_h, l.frame_w, l.channels)?)
}

fn check_len(got: usize, want: usize, what: &str) -> FfiResult {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what}: buffer holds {got} values, need {want}")).into());
    }
    Ok(())
}

fn frames_from(data: &[f64], n: usize, h: usize, w: usize, c: usize) -> Result<Vec<Frame>, Fail> {
    let per = h * w * c;
    check_len(data.len(), n * per, "frames")?;
    Ok(data
        .chunks_exact(per.max(1))
        .take(n)
        .map(|chunk| Array3::from_shape_vec((h, w, c), chunk.to_vec()).expect("sized"))
        .collect())
}

fn grid_from(data: &[f64], layout: &LayoutSpec) -> Result<GridTensor, Fail> {
    let [gh, gw, c] = layout.grid_shape();
    check_len(data.len(), gh * gw * c, "grid")?;
    let arr = Array3::from_shape_vec((gh, gw, c), data.to_vec()).expect("sized");
    Ok(GridTensor::new(arr, *layout)?)
}

fn write_out(out: &mut [f64], values: impl ExactSizeIterator<Item = f64>) -> FfiResult {
    check_len(out.len(), values.len(), "output")?;
    for (o, v) in out.iter_mut().zip(values) {
        *o = v;
    }
    Ok(())
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn grid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Packs `n_frames` frames into a grid buffer of `rows*frame_h * cols*frame_w * channels` values.
///
/// # Safety
/// `frames` must hold `frames_len` readable doubles and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn grid_pack(
    frames: *const f64,
    frames_len: usize,
    n_frames: usize,
    layout: GridLayout,
    out: *mut f64,
    out_len: usize,
) -> GridStatus {
    guard(|| {
        let l = layout_of(&layout)?;
        let data = slice(frames, frames_len, "frames")?;
        let fs = frames_from(data, n_frames, l.frame_h, l.frame_w, l.channels)?;
        let g = pack(&fs, &l)?;
        write_out(slice_mut(out, out_len, "out")?, g.data().iter().copied())
    })
}

/// Inverse of [`grid_pack`]: writes `rows*cols` frames in sequence order.
///
/// # Safety
/// `grid` must hold `grid_len` readable doubles and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn grid_unpack(
    grid: *const f64,
    grid_len: usize,
    layout: GridLayout,
    out: *mut f64,
    out_len: usize,
) -> GridStatus {
    guard(|| {
        let l = layout_of(&layout)?;
        let g = grid_from(slice(grid, grid_len, "grid")?, &l)?;
        let frames = unpack(&g)?;
        write_out(
            slice_mut(out, out_len, "out")?,
            frames.iter().flat_map(|f| f.iter().copied()).collect::<Vec<_>>().into_iter(),
        )
    })
}

/// Mean squared error between predicted and target velocity grids.
///
/// # Safety
/// `pred` and `target` must each hold `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_base_loss(
    pred: *const f64,
    target: *const f64,
    len: usize,
    layout: GridLayout,
    out: *mut f64,
) -> GridStatus {
    guard(|| {
        let l = layout_of(&layout)?;
        let p = grid_from(slice(pred, len, "pred")?, &l)?;
        let t = grid_from(slice(target, len, "target")?, &l)?;
        *out_ref(out, "out")? = base_loss(&p, &t)?;
        Ok(())
    })
}

/// Directional temporal loss between predicted and target velocity grids.
///
/// # Safety
/// `pred` and `target` must each hold `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_flow_loss(
    pred: *const f64,
    target: *const f64,
    len: usize,
    layout: GridLayout,
    out: *mut f64,
) -> GridStatus {
    guard(|| {
        let l = layout_of(&layout)?;
        let p = grid_from(slice(pred, len, "pred")?, &l)?;
        let t = grid_from(slice(target, len, "target")?, &l)?;
        *out_ref(out, "out")? = flow_loss(&p, &t)?;
        Ok(())
    })
}

/// Flow-loss weight at `step` for a linear ramp; negative steps are rejected.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_alpha_at(
    step: i64,
    alpha_max: f64,
    ramp_start: u64,
    ramp_end: u64,
    out: *mut f64,
) -> GridStatus {
    guard(|| {
        let s = AlphaSchedule::new(alpha_max, ramp_start, ramp_end)?;
        *out_ref(out, "out")? = alpha_at(step, &s)?;
        Ok(())
    })
}

/// PSNR in dB over `n_frames` frames; identical inputs give +infinity.
///
/// # Safety
/// `a` and `b` must each hold `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_psnr(
    a: *const f64,
    b: *const f64,
    len: usize,
    n_frames: usize,
    frame_h: usize,
    frame_w: usize,
    channels: usize,
    out: *mut f64,
) -> GridStatus {
    guard(|| {
        let fa = frames_from(slice(a, len, "a")?, n_frames, frame_h, frame_w, channels)?;
        let fb = frames_from(slice(b, len, "b")?, n_frames, frame_h, frame_w, channels)?;
        *out_ref(out, "out")? = psnr(&fa, &fb)?;
        Ok(())
    })
}

/// Mean SSIM over `n_frames` frames.
///
/// # Safety
/// `a` and `b` must each hold `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_ssim(
    a: *const f64,
    b: *const f64,
    len: usize,
    n_frames: usize,
    frame_h: usize,
    frame_w: usize,
    channels: usize,
    out: *mut f64,
) -> GridStatus {
    guard(|| {
        let fa = frames_from(slice(a, len, "a")?, n_frames, frame_h, frame_w, channels)?;
        let fb = frames_from(slice(b, len, "b")?, n_frames, frame_h, frame_w, channels)?;
        *out_ref(out, "out")? = ssim(&fa, &fb)?;
        Ok(())
    })
}

/// Creates a freshly initialized model.
///
/// # Safety
/// `config` must point to a valid config and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn grid_model_init(
    config: *const GridModelConfig,
    seed: u64,
    out: *mut *mut GridModel,
) -> GridStatus {
    guard(|| {
        let c = config.as_ref().ok_or(Fail::Null("config"))?;
        let slot = out_ref(out, "out")?;
        let cfg = ModelConfig {
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            depth: c.depth,
            heads: c.heads,
            cond_vocab: Label::COUNT,
            time_embed_dim: c.time_embed_dim,
            frame_h: c.frame_h,
            frame_w: c.frame_w,
            channels: c.channels,
        };
        let model = Model::init(cfg, seed)?;
        *slot = Box::into_raw(Box::new(GridModel { model }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grid_model_load(path: *const c_char, out: *mut *mut GridModel) -> GridStatus {
    guard(|| {
        let p = path_arg(path)?;
        let slot = out_ref(out, "out")?;
        let ckpt = load_checkpoint(&p)?;
        *slot = Box::into_raw(Box::new(GridModel { model: ckpt.model }));
        Ok(())
    })
}

/// Saves the model weights (without training state).
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn grid_model_save(model: *const GridModel, path: *const c_char) -> GridStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let p = path_arg(path)?;
        let ckpt = Checkpoint {
            model: m.model.clone(),
            progress: None,
            meta: serde_json::Value::Null,
        };
        Ok(save_checkpoint(&p, &ckpt)?)
    })
}

/// Number of scalar parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn grid_model_param_count(model: *const GridModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn grid_model_free(model: *mut GridModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the sampler. `refs` holds `n_refs` frames: none for free generation,
/// one for expansion, `rows` or `rows + 1` key frames for interpolation, and
/// `rows*cols` degraded frames for restoration. `labels` are label ids.
/// `out` receives the sampled grid.
///
/// # Safety
/// All pointers must reference buffers of the stated lengths; `model` must
/// come from this library.
#[no_mangle]
pub unsafe extern "C" fn grid_sample(
    model: *const GridModel,
    layout: GridLayout,
    mode: GridInitMode,
    refs: *const f64,
    refs_len: usize,
    n_refs: usize,
    labels: *const u32,
    n_labels: usize,
    config: *const GridSamplerConfig,
    out: *mut f64,
    out_len: usize,
) -> GridStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.model;
        let c = config.as_ref().ok_or(Fail::Null("config"))?;
        let l = layout_of(&layout)?;
        let refs = frames_from(slice(refs, refs_len, "refs")?, n_refs, l.frame_h, l.frame_w, l.channels)?;
        let labels = slice(labels, n_labels, "labels")?
            .iter()
            .map(|&id| {
                Label::from_id(id as usize)
                    .ok_or_else(|| Error::Config(format!("unknown label id {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cond = Condition::new(&l, labels)?;
        let cfg = SamplerConfig {
            noise_level: c.noise_level,
            steps: c.steps,
            guidance_scale: c.guidance_scale,
            mask_mode: if c.trajectory_consistent {
                MaskMode::TrajectoryConsistent
            } else {
                MaskMode::PaperLiteral
            },
            seed: c.seed,
            allow_degenerate: c.allow_degenerate,
        };
        let mode = match mode {
            GridInitMode::Free => InitMode::Free,
            GridInitMode::Expansion => InitMode::Expansion,
            GridInitMode::Interpolation => InitMode::Interpolation,
            GridInitMode::Restoration => InitMode::Restoration,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(1);
        let (init, mask) = init_grid(mode, &refs, &l, &mut rng)?;
        let g = sample(m, &init, &mask, &init, &cond, &cfg)?;
        write_out(slice_mut(out, out_len, "out")?, g.data().iter().copied())
    })
}
