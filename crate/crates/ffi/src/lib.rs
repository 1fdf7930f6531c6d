//! C ABI over `rfmi`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`RfmiStatus`]; on failure [`rfmi_last_error`] describes the
//! problem until the next call on the same thread. Configuration is passed
//! as JSON strings in the same shape the `rfmi` CLI accepts.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rfmi::bench::{make_task, sample_pair, MITask, TaskSpec};
use rfmi::flow::FlowModel;
use rfmi::mi::{mi_estimate, EstimateConfig, EstimatorTag, MIEstimate};
use rfmi::rng::substream;
use rfmi::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfmiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A synthetic task with known mutual information.
pub struct RfmiTask(MITask);

/// A trained conditional flow model.
pub struct RfmiModel(FlowModel);

/// One MI estimate in nats.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct RfmiEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_y: u64,
    pub n_t: u64,
    pub n_x: u64,
    pub seed: u64,
    pub wall_time_s: f64,
    /// 0 data-coupled, 1 trajectory, 2 analytic field, 3 InfoNCE.
    pub estimator: u32,
}

impl From<&MIEstimate> for RfmiEstimate {
    fn from(e: &MIEstimate) -> Self {
        Self {
            value: e.value,
            std_error: e.stderr,
            n_y: e.n_y as u64,
            n_t: e.n_t as u64,
            n_x: e.n_x as u64,
            seed: e.seed,
            wall_time_s: e.wall_time_s,
            estimator: match e.estimator_tag {
                EstimatorTag::RfmiDataCoupled => 0,
                EstimatorTag::RfmiTrajectory => 1,
                EstimatorTag::RfmiOracle => 2,
                EstimatorTag::Infonce => 3,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(RfmiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_numerical() {
            RfmiStatus::Numerical
        } else {
            match e {
                Error::Io(_) => RfmiStatus::Io,
                Error::Version { .. } | Error::Format(_) | Error::Json(_) | Error::Csv(_) => RfmiStatus::Format,
                _ => RfmiStatus::Config,
            }
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RfmiStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RfmiStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfmiStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            RfmiStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RfmiStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(RfmiStatus::Config, format!("{what}: {e}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rfmi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rfmi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a task from a JSON task spec such as
/// `{"family": "correlated-gaussian", "rho": [0.9]}`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfmi_task_new(spec_json: *const c_char, out: *mut *mut RfmiTask) -> RfmiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let spec: TaskSpec = parse_json(str_arg(spec_json, "spec_json")?, "task spec")?;
        let task = make_task("ffi", spec)?;
        *out = Box::into_raw(Box::new(RfmiTask(task)));
        Ok(())
    })
}

/// # Safety
/// `task` must come from [`rfmi_task_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rfmi_task_free(task: *mut RfmiTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Ground-truth mutual information of the task in nats.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rfmi_task_true_mi(task: *const RfmiTask, out: *mut f64) -> RfmiStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = t.0.true_mi;
        Ok(())
    })
}

/// Dimensions of the data and of the encoded condition.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rfmi_task_dims(task: *const RfmiTask, data_dim: *mut usize, condition_dim: *mut usize) -> RfmiStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        if data_dim.is_null() || condition_dim.is_null() {
            return Err(null("dimension output"));
        }
        *data_dim = t.0.data_dim();
        *condition_dim = t.0.condition_dim();
        Ok(())
    })
}

/// Draws `n` joint samples into row-major buffers of `n * data_dim` and
/// `n * condition_dim` doubles.
///
/// # Safety
/// `x` and `y` must point to at least `x_len` and `y_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rfmi_task_sample(
    task: *const RfmiTask,
    n: usize,
    seed: u64,
    x: *mut f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> RfmiStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        if x.is_null() || y.is_null() {
            return Err(null("sample buffer"));
        }
        let (need_x, need_y) = (n * t.0.data_dim(), n * t.0.condition_dim());
        if x_len < need_x || y_len < need_y {
            return Err(Failure(
                RfmiStatus::BufferTooSmall,
                format!("need {need_x} and {need_y} doubles, got {x_len} and {y_len}"),
            ));
        }
        let (xs, ys) = sample_pair(&t.0, &mut substream(seed, "ffi-sample"), n)?;
        std::slice::from_raw_parts_mut(x, need_x).copy_from_slice(xs.as_standard_layout().as_slice().unwrap());
        std::slice::from_raw_parts_mut(y, need_y).copy_from_slice(ys.as_standard_layout().as_slice().unwrap());
        Ok(())
    })
}

/// Loads a model file written by `rfmi train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfmi_model_load(path: *const c_char, out: *mut *mut RfmiModel) -> RfmiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = FlowModel::load(str_arg(path, "path")?.as_ref())?;
        *out = Box::into_raw(Box::new(RfmiModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`rfmi_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn rfmi_model_free(model: *mut RfmiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Estimates I(X; Y) for `task`. With a null `model` the task's analytic
/// velocity field is used. `config_json` may be null for the defaults.
///
/// # Safety
/// Non-null pointers must be valid; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rfmi_estimate(
    model: *const RfmiModel,
    task: *const RfmiTask,
    config_json: *const c_char,
    out: *mut RfmiEstimate,
) -> RfmiStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: EstimateConfig = if config_json.is_null() {
            EstimateConfig::default()
        } else {
            parse_json(str_arg(config_json, "config_json")?, "estimate config")?
        };
        let est = match model.as_ref() {
            Some(m) => mi_estimate(&m.0, &t.0, &cfg)?,
            None => {
                let oracle = t.0.oracle().ok_or_else(|| {
                    Failure(RfmiStatus::Config, "task has no analytic velocity field; pass a model".into())
                })?;
                mi_estimate(oracle, oracle, &cfg)?.with_tag(EstimatorTag::RfmiOracle)
            }
        };
        *out = RfmiEstimate::from(&est);
        Ok(())
    })
}
