//! C ABI over the distillation engine.
//!
//! Objects cross the boundary as opaque pointers written through an output
//! argument and released by the matching `td_*_free`.
//! Every fallible call returns a [`TdStatus`]; on failure the message is
//! available from [`td_last_error`] on the same thread until the next
//! failing call.
//!
//! Pointers passed in must be valid for the duration of the call. Output
//! pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tabdistill::data::{self, Dataset, Schema};
use tabdistill::orchestrator::{self, BaselineStrategy, RunConfig, RunInputs, RunRecord};
use tabdistill::teachers::{self, TeacherFamily, TeacherOracle};
use tabdistill::tensor::Tensor;
use tabdistill::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdStatus {
    Ok = 0,
    /// Bad argument value or configuration.
    Usage = 1,
    /// Unreadable or malformed input files.
    Data = 2,
    /// Non-finite values or an undefined metric.
    Numeric = 3,
    /// A required pointer was null or a string was not UTF-8.
    InvalidPointer = 4,
    /// The engine panicked; the handle involved should be discarded.
    Internal = 5,
}

pub struct TdDataset(Dataset);
pub struct TdTeacher(TeacherOracle);
pub struct TdConfig(RunConfig);
pub struct TdRecord(RunRecord);

/// Final test-split metrics of a run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TdMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// NaN when the test split has a single class.
    pub auc: f64,
    pub agreement: f64,
    pub coverage: f64,
    pub queries: u64,
    /// Nonzero when the run stopped at its query budget.
    pub partial: i32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TdBaseline {
    Random = 0,
    EntropyGuided = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> TdStatus {
    if e.is_data() {
        TdStatus::Data
    } else if e.is_numeric() || matches!(e, Error::UndefinedMetric(_)) {
        TdStatus::Numeric
    } else {
        TdStatus::Usage
    }
}

enum Fail {
    Engine(Error),
    Pointer(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdStatus::Ok,
        Ok(Err(Fail::Engine(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Pointer(what))) => {
            set_error(format!("{what} is null or not valid UTF-8"));
            TdStatus::InvalidPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            TdStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Pointer(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Pointer(what))
}

unsafe fn opt_path(p: *const c_char, what: &'static str) -> Result<Option<PathBuf>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        Ok(Some(PathBuf::from(str_arg(p, what)?)))
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Pointer(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Pointer(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Pointer("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library.
#[no_mangle]
pub extern "C" fn td_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn td_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn td_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Encodes, standardizes and splits `csv_path` under `schema_path`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_prepare(
    csv_path: *const c_char,
    schema_path: *const c_char,
    split_seed: u64,
    out: *mut *mut TdDataset,
) -> TdStatus {
    guard(|| {
        let csv = str_arg(csv_path, "csv_path")?;
        let schema = Schema::load(str_arg(schema_path, "schema_path")?.as_ref())?;
        emit(out, TdDataset(data::prepare(csv.as_ref(), &schema, split_seed)?))
    })
}

/// Loads a directory written by `prepare`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_load(dir: *const c_char, out: *mut *mut TdDataset) -> TdStatus {
    guard(|| emit(out, TdDataset(Dataset::load(str_arg(dir, "dir")?.as_ref())?)))
}

/// Rows (`n_rows`) and features (`n_features`) of a dataset.
///
/// # Safety
/// `ds` must be a live dataset handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_shape(ds: *const TdDataset, n_rows: *mut usize, n_features: *mut usize) -> TdStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.0;
        *handle_mut(n_rows, "n_rows")? = d.len();
        *handle_mut(n_features, "n_features")? = d.n_features();
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn td_dataset_free(ds: *mut TdDataset) {
    free(ds)
}

/// Trains a teacher of `family` (`"nn"`, `"rf"` or `"gbdt"`) on the
/// training split.
///
/// # Safety
/// `ds` must be live; `family` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_teacher_train(
    ds: *const TdDataset,
    family: *const c_char,
    seed: u64,
    out: *mut *mut TdTeacher,
) -> TdStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.0;
        let fam: TeacherFamily = str_arg(family, "family")?.parse()?;
        let (oracle, _) = teachers::train_teacher(d, fam, seed)?;
        emit(out, TdTeacher(oracle))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_teacher_load(path: *const c_char, out: *mut *mut TdTeacher) -> TdStatus {
    guard(|| emit(out, TdTeacher(TeacherOracle::load(str_arg(path, "path")?.as_ref())?)))
}

/// # Safety
/// `t` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn td_teacher_save(t: *const TdTeacher, path: *const c_char) -> TdStatus {
    guard(|| Ok(handle(t, "teacher")?.0.save(str_arg(path, "path")?.as_ref())?))
}

/// Positive-class probability for each of `rows` row-major rows of `cols`
/// standardized features, written to `out[0..rows]`.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` room for `rows`.
#[no_mangle]
pub unsafe extern "C" fn td_teacher_predict(
    t: *const TdTeacher,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> TdStatus {
    guard(|| {
        let oracle = &handle(t, "teacher")?.0;
        if x.is_null() || out.is_null() {
            return Err(Fail::Pointer("x or out"));
        }
        let input = Tensor::new(rows, cols, std::slice::from_raw_parts(x, rows * cols).to_vec())?;
        let p = oracle.predict_batch(&input)?;
        let dst = std::slice::from_raw_parts_mut(out, rows);
        for (r, v) in dst.iter_mut().enumerate() {
            *v = p.get(r, 1);
        }
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn td_teacher_free(t: *mut TdTeacher) {
    free(t)
}

/// Default run configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_config_default(out: *mut *mut TdConfig) -> TdStatus {
    guard(|| emit(out, TdConfig(RunConfig::default())))
}

/// Parses a TOML run configuration; absent fields take defaults.
///
/// # Safety
/// `toml` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_config_from_toml(toml: *const c_char, out: *mut *mut TdConfig) -> TdStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(str_arg(toml, "toml")?)?;
        cfg.validate()?;
        emit(out, TdConfig(cfg))
    })
}

/// Budget-matched copy of `cfg` spending exactly `budget` queries.
///
/// # Safety
/// `cfg` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_config_budget_matched(cfg: *const TdConfig, budget: u64, out: *mut *mut TdConfig) -> TdStatus {
    guard(|| {
        let c = handle(cfg, "config")?.0.budget_matched(budget)?;
        emit(out, TdConfig(c))
    })
}

/// The configuration serialized as TOML. Free with [`td_string_free`].
///
/// # Safety
/// `cfg` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_config_to_toml(cfg: *const TdConfig, out: *mut *mut c_char) -> TdStatus {
    guard(|| {
        let text = toml::to_string(&handle(cfg, "config")?.0)
            .map_err(|e| Error::Format(e.to_string()))?;
        let c = CString::new(text).map_err(|e| Error::Format(e.to_string()))?;
        *handle_mut(out, "out")? = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn td_config_free(cfg: *mut TdConfig) {
    free(cfg)
}

unsafe fn run_inputs<'a>(t: *const TdTeacher, ds: *const TdDataset) -> Result<RunInputs<'a>, Fail> {
    Ok(RunInputs {
        teacher: handle(t, "teacher")?.0.model(),
        dataset: &handle(ds, "dataset")?.0,
    })
}

/// One three-phase distillation run. Writes the run directory when
/// `out_dir` is non-null.
///
/// # Safety
/// Handles must be live; `out_dir` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_distill(
    t: *const TdTeacher,
    ds: *const TdDataset,
    cfg: *const TdConfig,
    seed: u64,
    out_dir: *const c_char,
    out: *mut *mut TdRecord,
) -> TdStatus {
    guard(|| {
        let inputs = run_inputs(t, ds)?;
        let c = &handle(cfg, "config")?.0;
        let dir = opt_path(out_dir, "out_dir")?;
        let r = orchestrator::run_distillation(inputs, c, seed, dir.as_deref())?;
        emit(out, TdRecord(r))
    })
}

/// One query-budgeted baseline run; `strategy` is a [`TdBaseline`] value.
///
/// # Safety
/// As for [`td_distill`].
#[no_mangle]
pub unsafe extern "C" fn td_baseline(
    t: *const TdTeacher,
    ds: *const TdDataset,
    cfg: *const TdConfig,
    seed: u64,
    strategy: u32,
    out_dir: *const c_char,
    out: *mut *mut TdRecord,
) -> TdStatus {
    guard(|| {
        let inputs = run_inputs(t, ds)?;
        let c = &handle(cfg, "config")?.0;
        let dir = opt_path(out_dir, "out_dir")?;
        let s = match strategy {
            x if x == TdBaseline::Random as u32 => BaselineStrategy::Random,
            x if x == TdBaseline::EntropyGuided as u32 => BaselineStrategy::EntropyGuided,
            other => return Err(Error::InvalidArgument(format!("unknown baseline strategy {other}")).into()),
        };
        let r = orchestrator::run_baseline(inputs, c, seed, s, dir.as_deref())?;
        emit(out, TdRecord(r))
    })
}

/// # Safety
/// `rec` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_record_metrics(rec: *const TdRecord, out: *mut TdMetrics) -> TdStatus {
    guard(|| {
        let r = &handle(rec, "record")?.0;
        let m = &r.final_metrics;
        *handle_mut(out, "out")? = TdMetrics {
            accuracy: m.accuracy,
            f1: m.f1,
            auc: m.auc.unwrap_or(f64::NAN),
            agreement: m.agreement,
            coverage: r.coverage,
            queries: r.queries,
            partial: i32::from(r.partial),
        };
        Ok(())
    })
}

/// Number of evaluation checkpoints of a run.
///
/// # Safety
/// `rec` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_record_checkpoints(rec: *const TdRecord, out: *mut usize) -> TdStatus {
    guard(|| {
        *handle_mut(out, "out")? = handle(rec, "record")?.0.checkpoints.len();
        Ok(())
    })
}

/// Coverage/agreement correlation over the checkpoints. Writes NaN when
/// either series is constant; fails with `Numeric` below the minimum
/// checkpoint count.
///
/// # Safety
/// `rec` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_record_correlation(rec: *const TdRecord, out: *mut f64) -> TdStatus {
    guard(|| {
        let c = handle(rec, "record")?.0.correlation()?;
        *handle_mut(out, "out")? = c.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Checkpoint stream in the `metrics.csv` format. Free with
/// [`td_string_free`].
///
/// # Safety
/// `rec` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn td_record_metrics_csv(rec: *const TdRecord, out: *mut *mut c_char) -> TdStatus {
    guard(|| {
        let text = orchestrator::metrics_csv(&handle(rec, "record")?.0);
        let c = CString::new(text).map_err(|e| Error::Format(e.to_string()))?;
        *handle_mut(out, "out")? = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `rec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn td_record_free(rec: *mut TdRecord) {
    free(rec)
}
