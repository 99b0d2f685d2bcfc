//! C interface to `blindcs`.
//!
//! Every function returns a [`BcsStatus`]; on failure a description is
//! available from [`bcs_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller, who releases them with the matching
//! `_free` function. Matrices are column-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use blindcs::block_inference::bomp_assign_one;
use blindcs::learner::{learn, learn_from, load_checkpoint, write_codes, InitStrategy, LearnerConfig};
use blindcs::model::objective;
use blindcs::sensing::{make_gaussian, make_pixel_mask};
use blindcs::{BlockDictionary, BlockSparseCode, Error, Measurement, MeasurementSet};
use nalgebra::DVector;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

/// Learner settings. Start from `bcs_learner_config_default()`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BcsLearnerConfig {
    /// Largest block size.
    pub k_max: usize,
    /// Number of atoms.
    pub r: usize,
    pub max_outer_iters: usize,
    pub objective_rel_tol: f64,
    pub sac_threshold: f64,
    /// Agglomerate every this many iterations; 0 disables it.
    pub sac_every: usize,
    pub restarts: usize,
    /// Initialize atoms from back-projected measurements instead of noise.
    pub data_init: bool,
    pub seed: u64,
}

impl From<&BcsLearnerConfig> for LearnerConfig {
    fn from(c: &BcsLearnerConfig) -> Self {
        LearnerConfig {
            k_max: c.k_max,
            r: c.r,
            max_outer_iters: c.max_outer_iters,
            objective_rel_tol: c.objective_rel_tol,
            sac_threshold: c.sac_threshold,
            sac_every: c.sac_every,
            restarts: c.restarts,
            init: if c.data_init { InitStrategy::Data } else { InitStrategy::Random },
            seed: c.seed,
            ..Default::default()
        }
    }
}

/// A growing collection of per-signal measurements of length-`n` signals.
pub struct BcsMeasurementSet {
    inner: MeasurementSet,
}

/// A learned dictionary together with the codes of its training signals.
pub struct BcsModel {
    dict: BlockDictionary,
    codes: Vec<BlockSparseCode>,
    objective: f64,
}

struct Failure {
    status: BcsStatus,
    message: String,
}

impl Failure {
    fn new(status: BcsStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. } => BcsStatus::DimensionMismatch,
            Error::Contract(_) | Error::TooLarge(_) => BcsStatus::InvalidArgument,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) | Error::Format(_) => BcsStatus::Io,
            _ => BcsStatus::Numerical,
        };
        Failure::new(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Outcome) -> BcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BcsStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            BcsStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::new(BcsStatus::NullPointer, format!("{name} is null"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(BcsStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message of the most recent failure on the calling thread. The pointer
/// stays valid until the next failing call on that thread.
#[no_mangle]
pub extern "C" fn bcs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bcs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn bcs_learner_config_default() -> BcsLearnerConfig {
    let d = LearnerConfig::default();
    BcsLearnerConfig {
        k_max: d.k_max,
        r: d.r,
        max_outer_iters: d.max_outer_iters,
        objective_rel_tol: d.objective_rel_tol,
        sac_threshold: d.sac_threshold,
        sac_every: d.sac_every,
        restarts: d.restarts,
        data_init: d.init == InitStrategy::Data,
        seed: d.seed,
    }
}

/// Creates an empty set for signals of length `n`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn bcs_measurements_new(n: usize, out: *mut *mut BcsMeasurementSet) -> BcsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        if n == 0 {
            return Err(Failure::new(BcsStatus::InvalidArgument, "n must be positive"));
        }
        *out = Box::into_raw(Box::new(BcsMeasurementSet {
            inner: MeasurementSet::new(n),
        }));
        Ok(())
    })
}

/// # Safety
/// `set` must be null or a handle from `bcs_measurements_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcs_measurements_free(set: *mut BcsMeasurementSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// # Safety
/// `set` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bcs_measurements_len(set: *const BcsMeasurementSet, out: *mut usize) -> BcsStatus {
    guard(|| {
        *deref_mut(out, "out")? = deref(set, "set")?.inner.len();
        Ok(())
    })
}

/// Adds a signal observed at `m` coordinates: `values[j]` is entry
/// `indices[j]` of the signal.
///
/// # Safety
/// `indices` and `values` must each point to `m` readable elements.
#[no_mangle]
pub unsafe extern "C" fn bcs_measurements_push_pixels(
    set: *mut BcsMeasurementSet,
    indices: *const usize,
    values: *const f64,
    m: usize,
) -> BcsStatus {
    guard(|| {
        let set = deref_mut(set, "set")?;
        let indices = slice(indices, m, "indices")?;
        let values = slice(values, m, "values")?;
        // the sensor stores its rows sorted, so pair values with indices first
        let mut pairs: Vec<(usize, f64)> = indices.iter().copied().zip(values.iter().copied()).collect();
        pairs.sort_unstable_by_key(|p| p.0);
        let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let sensor = make_pixel_mask(set.inner.n(), &ids)?;
        let y = DVector::from_iterator(m, pairs.iter().map(|p| p.1));
        set.inner.push(Measurement::new(sensor, y)?)?;
        Ok(())
    })
}

/// Fills `rows` (column-major, `m × n`) with the Gaussian sensor that
/// `bcs_measurements_push_gaussian` builds from the same `seed`.
///
/// # Safety
/// `rows` must point to `m * n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bcs_gaussian_sensor(m: usize, n: usize, seed: u64, rows: *mut f64) -> BcsStatus {
    guard(|| {
        let sensor = make_gaussian(m, n, seed)?;
        slice_mut(rows, m * n, "rows")?.copy_from_slice(sensor.rows().as_slice());
        Ok(())
    })
}

/// Adds `y = A x` where `A` is the `m × n` Gaussian sensor drawn from `seed`.
///
/// # Safety
/// `y` must point to `m` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn bcs_measurements_push_gaussian(
    set: *mut BcsMeasurementSet,
    seed: u64,
    y: *const f64,
    m: usize,
) -> BcsStatus {
    guard(|| {
        let set = deref_mut(set, "set")?;
        let sensor = make_gaussian(m, set.inner.n(), seed)?;
        let y = DVector::from_column_slice(slice(y, m, "y")?);
        set.inner.push(Measurement::new(sensor, y)?)?;
        Ok(())
    })
}

fn into_model(state: blindcs::learner::LearnerState) -> BcsModel {
    let objective = state.objective();
    BcsModel {
        dict: state.dict,
        codes: state.codes,
        objective,
    }
}

/// Learns a block dictionary from the measurements.
///
/// # Safety
/// `set`, `config` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bcs_learn(
    set: *const BcsMeasurementSet,
    config: *const BcsLearnerConfig,
    out: *mut *mut BcsModel,
) -> BcsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let set = deref(set, "set")?;
        let cfg = LearnerConfig::from(deref(config, "config")?);
        let state = learn(&set.inner, &cfg)?;
        *out = Box::into_raw(Box::new(into_model(state)));
        Ok(())
    })
}

/// Continues learning from `start`, which must have one code per
/// measurement. `start` is left untouched.
///
/// # Safety
/// `set`, `start`, `config` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bcs_learn_resume(
    set: *const BcsMeasurementSet,
    start: *const BcsModel,
    config: *const BcsLearnerConfig,
    out: *mut *mut BcsModel,
) -> BcsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let set = deref(set, "set")?;
        let start = deref(start, "start")?;
        let cfg = LearnerConfig::from(deref(config, "config")?);
        let state = learn_from(&set.inner, &cfg, start.dict.clone(), start.codes.clone())?;
        *out = Box::into_raw(Box::new(into_model(state)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_free(model: *mut BcsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Signal length.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_n(model: *const BcsModel) -> usize {
    model.as_ref().map_or(0, |m| m.dict.n())
}

/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_num_blocks(model: *const BcsModel) -> usize {
    model.as_ref().map_or(0, |m| m.dict.num_blocks())
}

/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_num_atoms(model: *const BcsModel) -> usize {
    model.as_ref().map_or(0, |m| m.dict.r())
}

/// Number of training signals the model holds codes for.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_num_signals(model: *const BcsModel) -> usize {
    model.as_ref().map_or(0, |m| m.codes.len())
}

/// Final training objective; NaN for a model read from disk.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_objective(model: *const BcsModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.objective)
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_block_size(model: *const BcsModel, block: usize, out: *mut usize) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if block >= m.dict.num_blocks() {
            return Err(Failure::new(BcsStatus::InvalidArgument, format!("block {block} out of range")));
        }
        *deref_mut(out, "out")? = m.dict.block_size(block);
        Ok(())
    })
}

/// Atom indices of `block`, `block_size` of them.
///
/// # Safety
/// `out` must point to `bcs_model_block_size(block)` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_block_atoms(model: *const BcsModel, block: usize, out: *mut usize) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if block >= m.dict.num_blocks() {
            return Err(Failure::new(BcsStatus::InvalidArgument, format!("block {block} out of range")));
        }
        let cols = m.dict.block_cols(block);
        slice_mut(out, cols.len(), "out")?.copy_from_slice(cols);
        Ok(())
    })
}

/// Copies the `n × r` atom matrix, column-major.
///
/// # Safety
/// `out` must point to `n * r` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_atoms(model: *const BcsModel, out: *mut f64) -> BcsStatus {
    guard(|| {
        let atoms = deref(model, "model")?.dict.atoms();
        slice_mut(out, atoms.len(), "out")?.copy_from_slice(atoms.as_slice());
        Ok(())
    })
}

/// Block of every training signal; `SIZE_MAX` for signals no block could fit.
///
/// # Safety
/// `out` must point to `bcs_model_num_signals` writable elements.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_assignment(model: *const BcsModel, out: *mut usize) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = slice_mut(out, m.codes.len(), "out")?;
        for (o, c) in out.iter_mut().zip(&m.codes) {
            *o = c.active_block().unwrap_or(usize::MAX);
        }
        Ok(())
    })
}

/// Reconstruction `D s` of training signal `signal`.
///
/// # Safety
/// `out` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_reconstruct(model: *const BcsModel, signal: usize, out: *mut f64) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let code = m.codes.get(signal).ok_or_else(|| {
            Failure::new(BcsStatus::InvalidArgument, format!("signal {signal} out of range"))
        })?;
        let x = code.reconstruct(&m.dict);
        slice_mut(out, x.len(), "out")?.copy_from_slice(x.as_slice());
        Ok(())
    })
}

/// Fits a new signal observed at `m` coordinates to its best block and
/// writes the full length-`n` estimate to `out`. `block` (optional) receives
/// the chosen block.
///
/// # Safety
/// `indices` and `values` must hold `m` elements; `out` must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_fit_pixels(
    model: *const BcsModel,
    indices: *const usize,
    values: *const f64,
    m: usize,
    out: *mut f64,
    block: *mut usize,
) -> BcsStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let mut set = BcsMeasurementSet {
            inner: MeasurementSet::new(model.dict.n()),
        };
        let status = bcs_measurements_push_pixels(&mut set, indices, values, m);
        if status != BcsStatus::Ok {
            let message = LAST_ERROR.with(|e| e.borrow().to_string_lossy().into_owned());
            return Err(Failure::new(status, message));
        }
        let choice = bomp_assign_one(set.inner.get(0), &model.dict)?;
        let x = BlockSparseCode::new(choice.block, choice.coefficients).reconstruct(&model.dict);
        slice_mut(out, x.len(), "out")?.copy_from_slice(x.as_slice());
        if let Some(b) = block.as_mut() {
            *b = choice.block;
        }
        Ok(())
    })
}

/// Objective of the model's dictionary and codes on `set`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_evaluate(
    model: *const BcsModel,
    set: *const BcsMeasurementSet,
    out: *mut f64,
) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let set = deref(set, "set")?;
        *deref_mut(out, "out")? = objective(&set.inner, &m.dict, &m.codes)?;
        Ok(())
    })
}

/// Writes `dictionary.bin`, `dictionary.json` and `codes.csv` into `dir`,
/// the layout `blindcs learn --resume` reads.
///
/// # Safety
/// `model` must be valid and `dir` a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_save(model: *const BcsModel, dir: *const c_char) -> BcsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let dir = path(dir)?;
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        m.dict.save(&dir.join("dictionary.bin"), &dir.join("dictionary.json"))?;
        let mut w = BufWriter::new(File::create(dir.join("codes.csv")).map_err(Error::from)?);
        write_codes(&mut w, &m.codes)?;
        w.flush().map_err(Error::from)?;
        Ok(())
    })
}

/// Reads a model written by `bcs_model_save` or `blindcs learn`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn bcs_model_load(dir: *const c_char, out: *mut *mut BcsModel) -> BcsStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = ptr::null_mut();
        let (dict, codes) = load_checkpoint(&path(dir)?)?;
        *out = Box::into_raw(Box::new(BcsModel {
            dict,
            codes,
            objective: f64::NAN,
        }));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        unsafe { CStr::from_ptr(bcs_last_error_message()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), BcsStatus::Panic);
        assert_eq!(message(), "panic: boom");
    }

    #[test]
    fn library_errors_map_to_statuses() {
        let cases = [
            (Error::Contract("x".into()), BcsStatus::InvalidArgument),
            (Error::Format("x".into()), BcsStatus::Io),
            (Error::EmptyBlock { block: 1 }, BcsStatus::Numerical),
            (
                Error::DimensionMismatch {
                    index: 0,
                    detail: "x".into(),
                },
                BcsStatus::DimensionMismatch,
            ),
        ];
        for (e, status) in cases {
            let text = e.to_string();
            assert_eq!(guard(|| Err(e.into())), status);
            assert_eq!(message(), text);
        }
    }

    #[test]
    fn default_config_matches_library() {
        let c = bcs_learner_config_default();
        let back = LearnerConfig::from(&c);
        let d = LearnerConfig::default();
        assert_eq!((back.k_max, back.r, back.restarts, back.seed), (d.k_max, d.r, d.restarts, d.seed));
        assert_eq!(back.init, d.init);
    }
}
