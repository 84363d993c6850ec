//! C ABI over `ternres`.
//!
//! Every fallible call returns a [`TrStatus`]. On failure the message is kept
//! per thread and read back with [`tr_last_error_message`]. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ternres::cost::{self, block_stats};
use ternres::residual::quantize_scales_8bit;
use ternres::store::{load_quantized, save_quantized, Network, Tensor};
use ternres::{
    convert_model, downgrade, make_schedule, reconstruct, ternarize, ternary_residual_sq, Error, LevelBudget,
    QuantizedLayer, QuantizedModel, ScheduleSpec,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NotConverged = 4,
    PathMismatch = 5,
    Io = 6,
    Format = 7,
    UnsupportedDtype = 8,
    Json = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Storage footprint of a block layout.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrBlockStats {
    pub size_bits: f64,
    /// Saturates at `UINT64_MAX`.
    pub capacity: u64,
    pub num_scaling_factors: usize,
}

/// One quantized weight tensor.
pub struct TrLayer(QuantizedLayer);

/// A quantized network.
pub struct TrModel(QuantizedModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) => TrStatus::InvalidArgument,
            Error::Format(_) => TrStatus::Format,
            Error::UnsupportedDtype(_) => TrStatus::UnsupportedDtype,
            Error::ShapeMismatch(_) => TrStatus::ShapeMismatch,
            Error::NotConverged { .. } => TrStatus::NotConverged,
            Error::PathMismatch { .. } => TrStatus::PathMismatch,
            Error::Io { .. } => TrStatus::Io,
            Error::Json(_) => TrStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: TrStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "\\0")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            TrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(TrStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return fail(TrStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| Failure(TrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| Failure(TrStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return fail(TrStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(TrStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

fn copy_into(dst: &mut [f32], src: &[f32]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return fail(
            TrStatus::BufferTooSmall,
            format!("buffer holds {} values, {} needed", dst.len(), src.len()),
        );
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed status-returning call on this thread, or NULL
/// if that call succeeded.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn tr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Ternarizes `len` weights. Writes one sign per weight and the scale.
///
/// # Safety
/// `w` and `signs_out` must point to `len` valid elements, `alpha_out` to one.
#[no_mangle]
pub unsafe extern "C" fn tr_ternarize(w: *const f32, len: usize, signs_out: *mut i8, alpha_out: *mut f32) -> TrStatus {
    guard(|| {
        let w = slice(w, len, "w")?;
        let signs = slice_mut(signs_out, len, "signs_out")?;
        let alpha = out(alpha_out, "alpha_out")?;
        let level = ternarize(w)?;
        signs.copy_from_slice(&level.signs);
        *alpha = level.alpha;
        Ok(())
    })
}

/// Converts a flat weight vector into ternary residual blocks of
/// `block_size` until the relative squared error is at most `epsilon_sq`.
/// When no block can be refined any further the layer is still returned
/// with `tr_layer_delta` above the budget.
///
/// # Safety
/// `w` must point to `len` floats and `out_layer` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_quantize(
    w: *const f32,
    len: usize,
    block_size: usize,
    epsilon_sq: f64,
    max_levels: usize,
    out_layer: *mut *mut TrLayer,
) -> TrStatus {
    guard(|| {
        let dst = out(out_layer, "out_layer")?;
        *dst = ptr::null_mut();
        let data = slice(w, len, "w")?.to_vec();
        let tensor = Tensor::new("w", vec![len], data)?;
        let conv = ternary_residual_sq(&tensor, block_size, epsilon_sq, max_levels)?;
        *dst = Box::into_raw(Box::new(TrLayer(conv.layer)));
        Ok(())
    })
}

/// Achieved relative squared error, or NaN for a null handle.
///
/// # Safety
/// `layer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_delta(layer: *const TrLayer) -> f64 {
    layer.as_ref().map_or(f64::NAN, |l| l.0.delta)
}

/// Number of weights, or 0 for a null handle.
///
/// # Safety
/// `layer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_len(layer: *const TrLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.0.len())
}

/// Ternary levels across all blocks, or 0 for a null handle.
///
/// # Safety
/// `layer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_total_levels(layer: *const TrLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.0.total_levels())
}

/// Writes the dense reconstruction into `out`, which must hold exactly
/// `tr_layer_len` floats.
///
/// # Safety
/// `layer` must be a live handle and `out` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_reconstruct(layer: *const TrLayer, out: *mut f32, len: usize) -> TrStatus {
    guard(|| {
        let layer = handle(layer, "layer")?;
        let dst = slice_mut(out, len, "out")?;
        copy_into(dst, reconstruct(&layer.0).data())
    })
}

/// # Safety
/// `layer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tr_layer_free(layer: *mut TrLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Loads a network manifest and converts it with one uniform budget.
/// `scales_8bit` non-zero also rounds the scales to 8-bit fixed point.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_convert(
    manifest_path: *const c_char,
    block_size: usize,
    epsilon_sq: f64,
    max_levels: usize,
    scales_8bit: i32,
    out_model: *mut *mut TrModel,
) -> TrStatus {
    guard(|| {
        let dst = out(out_model, "out_model")?;
        *dst = ptr::null_mut();
        let net = Network::load(path(manifest_path)?)?;
        let schedule = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq })?;
        let mut model = convert_model(&net, block_size, &schedule, max_levels)?.model;
        if scales_8bit != 0 {
            model = quantize_scales_8bit(&model, &net)?;
        }
        *dst = Box::into_raw(Box::new(TrModel(model)));
        Ok(())
    })
}

/// # Safety
/// `path_in` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_load(path_in: *const c_char, out_model: *mut *mut TrModel) -> TrStatus {
    guard(|| {
        let dst = out(out_model, "out_model")?;
        *dst = ptr::null_mut();
        let model = load_quantized(path(path_in)?)?;
        *dst = Box::into_raw(Box::new(TrModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path_out` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tr_model_save(model: *const TrModel, path_out: *const c_char) -> TrStatus {
    guard(|| {
        let model = handle(model, "model")?;
        save_quantized(&model.0, path(path_out)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tr_model_free(model: *mut TrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Quantized layers in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_model_layer_count(model: *const TrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.layers.len())
}

/// Levels summed over every block of every layer, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_model_total_levels(model: *const TrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.total_levels())
}

/// Number of blocks, which is also the smallest level count a downgrade
/// can keep. 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_model_base_blocks(model: *const TrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.base_blocks())
}

/// Total levels over base blocks, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tr_model_blocks_factor(model: *const TrModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.0.blocks_factor())
}

/// Weight count of layer `index`.
///
/// # Safety
/// `model` must be a live handle and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_layer_len(model: *const TrModel, index: usize, out_len: *mut usize) -> TrStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dst = out(out_len, "out_len")?;
        *dst = layer_at(&model.0, index)?.len();
        Ok(())
    })
}

/// Relative squared error of layer `index`.
///
/// # Safety
/// `model` must be a live handle and `out_delta` writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_layer_delta(model: *const TrModel, index: usize, out_delta: *mut f64) -> TrStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dst = out(out_delta, "out_delta")?;
        *dst = layer_at(&model.0, index)?.delta;
        Ok(())
    })
}

/// Dense weights of layer `index`, flattened row-major.
///
/// # Safety
/// `model` must be a live handle and `out` must point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn tr_model_reconstruct_layer(
    model: *const TrModel,
    index: usize,
    out: *mut f32,
    len: usize,
) -> TrStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let dst = slice_mut(out, len, "out")?;
        copy_into(dst, reconstruct(layer_at(&model.0, index)?).data())
    })
}

/// Drops the least important residual levels until `keep_levels` remain.
/// The source model is left untouched.
///
/// # Safety
/// `model` must be a live handle and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn tr_model_downgrade(
    model: *const TrModel,
    keep_levels: usize,
    out_model: *mut *mut TrModel,
) -> TrStatus {
    guard(|| {
        let dst = out(out_model, "out_model")?;
        *dst = ptr::null_mut();
        let model = handle(model, "model")?;
        let smaller = downgrade(&model.0, LevelBudget::Total(keep_levels))?;
        *dst = Box::into_raw(Box::new(TrModel(smaller)));
        Ok(())
    })
}

fn layer_at(model: &QuantizedModel, index: usize) -> Result<&QuantizedLayer, Failure> {
    match model.layers.get(index) {
        Some(l) => Ok(l),
        None => fail(
            TrStatus::InvalidArgument,
            format!("layer index {index} out of range for {} layers", model.layers.len()),
        ),
    }
}

/// Storage footprint of a length-`n` vector split into
/// `k` blocks where block `i` carries `residuals[i]` residual levels.
///
/// # Safety
/// `residuals` must point to `k` values and `out_stats` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tr_block_stats(
    n: usize,
    residuals: *const usize,
    k: usize,
    out_stats: *mut TrBlockStats,
) -> TrStatus {
    guard(|| {
        let r = slice(residuals, k, "residuals")?;
        let dst = out(out_stats, "out_stats")?;
        let s = block_stats(n, r)?;
        *dst = TrBlockStats {
            size_bits: s.size_bits,
            capacity: u64::try_from(s.capacity).unwrap_or(u64::MAX),
            num_scaling_factors: s.num_scaling_factors,
        };
        Ok(())
    })
}

/// High-precision multiplications saved per weight against 8-bit weights.
#[no_mangle]
pub extern "C" fn tr_mult_reduction(block_size: f64, blocks_factor: f64) -> f64 {
    cost::mult_reduction(block_size, blocks_factor)
}

/// Model size reduction against 8-bit weights.
#[no_mangle]
pub extern "C" fn tr_size_reduction(block_size: f64, blocks_factor: f64) -> f64 {
    cost::size_reduction_vs_88(block_size, blocks_factor)
}

#[no_mangle]
pub extern "C" fn tr_power_perf_gain(x: f64, compute_factor: f64, block_size: f64) -> f64 {
    cost::power_perf_gain(x, compute_factor, block_size)
}

/// Compute-bound and bandwidth-bound throughput gains.
///
/// # Safety
/// `pi_c` and `pi_m` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tr_throughput_gains(
    c: f64,
    block_size: f64,
    level_factor: f64,
    pi_c: *mut f64,
    pi_m: *mut f64,
) -> TrStatus {
    guard(|| {
        let (pc, pm) = cost::throughput_gains(c, block_size, level_factor);
        *out(pi_c, "pi_c")? = pc;
        *out(pi_m, "pi_m")? = pm;
        Ok(())
    })
}
