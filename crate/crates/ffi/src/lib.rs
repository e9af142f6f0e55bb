//! C ABI over the `stgin` library.
//!
//! Datasets and fitted models are opaque heap handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns a
//! [`StginStatus`]; on failure a human-readable message is kept per thread and
//! can be read with [`stgin_last_error_message`]. Panics never cross the
//! boundary: they are reported as [`StginStatus::Panic`].
//!
//! Matrices cross the boundary as row-major `double` buffers of
//! `nodes * steps` entries (row = sensor, column = time step).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use stgin::checkpoint;
use stgin::data::{apply_mask, synth_generate, MaskSpec, NormScheme, Regime, TrafficTensor, UnitTag};
use stgin::graph::SensorGraph;
use stgin::model::{Architecture, ModelConfig};
use stgin::train::{FittedModel, TrainingConfig};
use stgin::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StginStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NoObservedData = 4,
    Io = 5,
    Parse = 6,
    Checkpoint = 7,
    Diverged = 8,
    Other = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StginArchitecture {
    /// Graph attention followed by the bidirectional GRU.
    Full = 0,
    /// Graph convolution only.
    SpatialOnly = 1,
    /// Bidirectional GRU only.
    TemporalOnly = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StginRegime {
    /// Individual entries missing uniformly at random.
    Random = 0,
    /// Whole sensors missing.
    Nonrandom = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StginUnit {
    Speed = 0,
    Flow = 1,
    Synthetic = 2,
}

/// Training and model settings; start from [`stgin_train_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StginTrainOptions {
    pub architecture: StginArchitecture,
    pub gat_width: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub window_length: usize,
    pub patience: usize,
    pub seed: u64,
    /// `true` selects z-score normalization instead of min-max.
    pub zscore: bool,
}

/// A sensor matrix (with its observation mask) and its graph.
pub struct StginDataset {
    tensor: TrafficTensor,
    graph: SensorGraph,
}

/// A trained network with its normalization.
pub struct StginModel {
    fitted: FittedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StginStatus {
    match e {
        Error::Shape { .. } => StginStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => StginStatus::InvalidArgument,
        Error::NoObservedData => StginStatus::NoObservedData,
        Error::Io { .. } => StginStatus::Io,
        Error::Parse { .. } => StginStatus::Parse,
        Error::Checkpoint(_) => StginStatus::Checkpoint,
        Error::Diverged { .. } => StginStatus::Diverged,
        Error::NonFiniteProbe { .. } | Error::SvdNotConverged { .. } => StginStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, recording any error or panic for [`stgin_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StginStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StginStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            StginStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            StginStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for reads for the duration of the call.
unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: validity is the caller's contract; null is rejected here.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

/// # Safety
/// `p` must be null or a NUL-terminated string valid for the call.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null, NUL-terminated per the caller's contract.
    let s = unsafe { CStr::from_ptr(p) };
    let s = s.to_str().map_err(|_| Error::invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `buf` must be null or valid for `len` writes of `T`.
unsafe fn out_slice<'a, T>(buf: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if buf.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and sized by the caller's contract.
    Ok(unsafe { std::slice::from_raw_parts_mut(buf, len) })
}

fn expect_len(len: usize, want: usize, what: &str) -> Result<(), Failure> {
    if len != want {
        return Err(Error::shape("ffi", format!("{what} has {len} entries, expected {want}")).into());
    }
    Ok(())
}

fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: `out` is non-null and points to writable storage per the caller's contract.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stgin_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn stgin_train_options_default() -> StginTrainOptions {
    let m = ModelConfig::default();
    let t = TrainingConfig::default();
    StginTrainOptions {
        architecture: StginArchitecture::Full,
        gat_width: m.gat_width,
        hidden: m.hidden,
        lambda: t.lambda,
        learning_rate: t.learning_rate,
        max_epochs: t.max_epochs,
        window_length: t.window_length,
        patience: t.patience,
        seed: t.seed,
        zscore: false,
    }
}

/// Synthetic ring dataset: `nodes` sensors, `steps` five-minute steps.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_synth(
    nodes: usize,
    steps: usize,
    seed: u64,
    noise_std: f64,
    out: *mut *mut StginDataset,
) -> StginStatus {
    guard(|| {
        let ds = synth_generate(nodes, steps, seed, noise_std)?;
        write_handle(out, StginDataset { tensor: ds.tensor, graph: ds.graph })
    })
}

/// Loads a dataset CSV (header `timestamp,<sensor ids>`; empty cells are gaps)
/// and an adjacency CSV.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_load_csv(
    data_path: *const c_char,
    graph_path: *const c_char,
    unit: StginUnit,
    out: *mut *mut StginDataset,
) -> StginStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let data = unsafe { path_arg(data_path, "data_path") }?;
        // SAFETY: forwarded caller contract.
        let graph = unsafe { path_arg(graph_path, "graph_path") }?;
        let unit = match unit {
            StginUnit::Speed => UnitTag::Speed,
            StginUnit::Flow => UnitTag::Flow,
            StginUnit::Synthetic => UnitTag::Synthetic,
        };
        let tensor = TrafficTensor::load_csv(&data, unit)?;
        let graph = SensorGraph::read_csv(&graph)?;
        if graph.n() != tensor.n() {
            return Err(Error::shape("load", format!("graph has {} sensors, data has {}", graph.n(), tensor.n())).into());
        }
        write_handle(out, StginDataset { tensor, graph })
    })
}

/// Number of sensors, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_nodes(ds: *const StginDataset) -> usize {
    // SAFETY: caller contract.
    unsafe { ds.as_ref() }.map_or(0, |d| d.tensor.n())
}

/// Number of time steps, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_steps(ds: *const StginDataset) -> usize {
    // SAFETY: caller contract.
    unsafe { ds.as_ref() }.map_or(0, |d| d.tensor.t())
}

/// Copies the values (0 at unobserved entries) into `values[len]`.
///
/// # Safety
/// `ds` must be a live handle; `values` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_values(ds: *const StginDataset, values: *mut f64, len: usize) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let ds = unsafe { deref(ds, "dataset") }?;
        expect_len(len, ds.tensor.n() * ds.tensor.t(), "values")?;
        // SAFETY: caller contract.
        unsafe { out_slice(values, len, "values") }?.copy_from_slice(ds.tensor.values.as_slice());
        Ok(())
    })
}

/// Draws a held-out mask and returns a new dataset with those entries hidden.
/// If `observed` is non-null it receives the resulting mask (1 = observed).
///
/// # Safety
/// `ds` must be a live handle; `out` valid for one pointer write;
/// `observed` null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_mask(
    ds: *const StginDataset,
    regime: StginRegime,
    rate: f64,
    seed: u64,
    out: *mut *mut StginDataset,
    observed: *mut u8,
    len: usize,
) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let ds = unsafe { deref(ds, "dataset") }?;
        let regime = match regime {
            StginRegime::Random => Regime::Random,
            StginRegime::Nonrandom => Regime::Nonrandom,
        };
        let held = MaskSpec { regime, rate, seed }.generate(ds.tensor.n(), ds.tensor.t())?;
        let masked = apply_mask(&ds.tensor, &held)?;
        if !observed.is_null() {
            expect_len(len, ds.tensor.n() * ds.tensor.t(), "observed")?;
            // SAFETY: caller contract.
            let buf = unsafe { out_slice(observed, len, "observed") }?;
            for (b, &o) in buf.iter_mut().zip(masked.mask.as_slice()) {
                *b = u8::from(o);
            }
        }
        write_handle(out, StginDataset { tensor: masked, graph: ds.graph.clone() })
    })
}

/// Trains on the observed entries of `ds`.
///
/// # Safety
/// `ds` and `opts` must be valid; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn stgin_model_train(
    ds: *const StginDataset,
    opts: *const StginTrainOptions,
    out: *mut *mut StginModel,
) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let ds = unsafe { deref(ds, "dataset") }?;
        // SAFETY: caller contract.
        let o = unsafe { deref(opts, "opts") }?;
        let architecture = match o.architecture {
            StginArchitecture::Full => Architecture::Full,
            StginArchitecture::SpatialOnly => Architecture::SpatialOnly,
            StginArchitecture::TemporalOnly => Architecture::TemporalOnly,
        };
        let model_cfg = ModelConfig { architecture, gat_width: o.gat_width, hidden: o.hidden, ..ModelConfig::default() };
        let train_cfg = TrainingConfig {
            lambda: o.lambda,
            learning_rate: o.learning_rate,
            max_epochs: o.max_epochs,
            window_length: o.window_length,
            patience: o.patience,
            seed: o.seed,
            ..TrainingConfig::default()
        };
        let scheme = if o.zscore { NormScheme::ZScore } else { NormScheme::MinMax };
        let (fitted, _) = FittedModel::fit(&ds.tensor, &ds.graph, &model_cfg, &train_cfg, scheme)?;
        write_handle(out, StginModel { fitted })
    })
}

/// Writes the imputed mean and variance of every entry (physical units;
/// flow means clipped at zero) into `mu[len]` and `sigma2[len]`.
///
/// # Safety
/// Handles must be live; `mu` and `sigma2` valid for `len` writes each.
#[no_mangle]
pub unsafe extern "C" fn stgin_model_impute(
    model: *const StginModel,
    ds: *const StginDataset,
    mu: *mut f64,
    sigma2: *mut f64,
    len: usize,
) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let model = unsafe { deref(model, "model") }?;
        // SAFETY: caller contract.
        let ds = unsafe { deref(ds, "dataset") }?;
        expect_len(len, ds.tensor.n() * ds.tensor.t(), "output buffers")?;
        let field = model.fitted.impute(&ds.tensor, &ds.graph)?;
        let field = stgin::eval::clip_negative(&field, ds.tensor.unit);
        // SAFETY: caller contract.
        unsafe { out_slice(mu, len, "mu") }?.copy_from_slice(field.mu.as_slice());
        // SAFETY: caller contract.
        unsafe { out_slice(sigma2, len, "sigma2") }?.copy_from_slice(field.sigma2.as_slice());
        Ok(())
    })
}

/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stgin_model_save(model: *const StginModel, path: *const c_char) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let model = unsafe { deref(model, "model") }?;
        // SAFETY: caller contract.
        let path = unsafe { path_arg(path, "path") }?;
        checkpoint::save(&model.fitted, &path)?;
        Ok(())
    })
}

/// # Safety
/// `path` NUL-terminated; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn stgin_model_load(path: *const c_char, out: *mut *mut StginModel) -> StginStatus {
    guard(|| {
        // SAFETY: caller contract.
        let path = unsafe { path_arg(path, "path") }?;
        let fitted = checkpoint::load(&path)?;
        write_handle(out, StginModel { fitted })
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stgin_dataset_free(ds: *mut StginDataset) {
    if !ds.is_null() {
        // SAFETY: the handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stgin_model_free(model: *mut StginModel) {
    if !model.is_null() {
        // SAFETY: the handle came from Box::into_raw and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}
