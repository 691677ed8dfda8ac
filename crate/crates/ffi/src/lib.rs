//! C ABI for `ensrob`.
//!
//! Every function returns an [`ErStatus`]; on failure a message is
//! available from [`er_last_error_message`] on the same thread. Handles are
//! opaque and released with their `_free` function. Output pointers are only
//! written on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ensrob::analysis;
use ensrob::bounds::{self, BoundInputs, DropoutForm};
use ensrob::data::{self, BlobSpec, Dataset};
use ensrob::experiment as model_io;
use ensrob::nn::{self, BoundedLoss, MlpModel};
use ensrob::robustness::{self, Norm, PerturbationSpec, RobustnessEstimate};
use ensrob::Error;

/// Opaque trained or initialized network.
pub struct ErModel(MlpModel);

/// Opaque labelled dataset.
pub struct ErDataset(Dataset);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Io = 5,
    Format = 6,
    Consistency = 7,
    Protocol = 8,
    Config = 9,
    Domain = 10,
    Precondition = 11,
    Internal = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErNorm {
    L1 = 0,
    L2 = 1,
    Linf = 2,
}

impl From<ErNorm> for Norm {
    fn from(n: ErNorm) -> Norm {
        match n {
            ErNorm::L1 => Norm::L1,
            ErNorm::L2 => Norm::L2,
            ErNorm::Linf => Norm::Linf,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErDropoutForm {
    Stated = 0,
    Proof = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErBoundInputs {
    pub n: u64,
    pub m: f64,
    pub delta: f64,
    pub epsilon_bar: f64,
    pub k: u64,
    pub alpha: f64,
    pub beta: f64,
    pub layers: u64,
}

impl From<ErBoundInputs> for BoundInputs {
    fn from(b: ErBoundInputs) -> BoundInputs {
        BoundInputs {
            n: b.n,
            m: b.m,
            delta: b.delta,
            epsilon_bar: b.epsilon_bar,
            k: b.k,
            alpha: b.alpha,
            beta: b.beta,
            layers: b.layers,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErRobustness {
    pub epsilon_bar_emp: f64,
    pub variance_alpha: f64,
    pub t: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ErStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let status = status_of(&e);
        Failure(status, e.to_string())
    }
}

fn status_of(e: &Error) -> ErStatus {
    match e {
        Error::InvalidArchitecture(_) => ErStatus::InvalidArgument,
        Error::Shape(_) => ErStatus::Shape,
        Error::Numeric(_) | Error::TrainingDiverged { .. } => ErStatus::Numeric,
        Error::Config(_) | Error::Syntax { .. } => ErStatus::Config,
        Error::Format(_) => ErStatus::Format,
        Error::Consistency(_) => ErStatus::Consistency,
        Error::Io { .. } => ErStatus::Io,
        Error::Protocol(_) => ErStatus::Protocol,
        Error::Domain(_) | Error::UndefinedCorrelation(_) => ErStatus::Domain,
        Error::Precondition(_) | Error::OracleScope(_) => ErStatus::Precondition,
        Error::Member { source, .. } | Error::Stage { source, .. } => status_of(source),
        _ => ErStatus::Internal,
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ErStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ErStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            ErStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ErStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ErStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Failure> {
    if got != want {
        return Err(Failure(
            ErStatus::Shape,
            format!("{what} has length {got}, expected {want}"),
        ));
    }
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn er_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn er_status_name(status: ErStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ErStatus::Ok => c"ok",
        ErStatus::NullPointer => c"null_pointer",
        ErStatus::InvalidArgument => c"invalid_argument",
        ErStatus::Shape => c"shape",
        ErStatus::Numeric => c"numeric",
        ErStatus::Io => c"io",
        ErStatus::Format => c"format",
        ErStatus::Consistency => c"consistency",
        ErStatus::Protocol => c"protocol",
        ErStatus::Config => c"config",
        ErStatus::Domain => c"domain",
        ErStatus::Precondition => c"precondition",
        ErStatus::Internal => c"internal",
        ErStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// # Safety
/// `dims` points to `depth` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_model_init(
    dims: *const usize,
    depth: usize,
    seed: u64,
    scale: f64,
    out: *mut *mut ErModel,
) -> ErStatus {
    guard(|| {
        let dims = slice(dims, depth, "dims")?;
        let model = nn::init_mlp(dims, seed, scale)?;
        write_out(out, Box::into_raw(Box::new(ErModel(model))), "out")
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_model_load(path_c: *const c_char, out: *mut *mut ErModel) -> ErStatus {
    guard(|| {
        let p = path(path_c, "path")?;
        let h = model_io::load_hypothesis(&p)?;
        write_out(out, Box::into_raw(Box::new(ErModel(h.model))), "out")
    })
}

/// Writes the binary model file (no sidecar).
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn er_model_save(model: *const ErModel, path_c: *const c_char) -> ErStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let p = path(path_c, "path")?;
        std::fs::write(&p, model_io::encode_model(&m.0))
            .map_err(|e| Error::Io { path: p, source: e })?;
        Ok(())
    })
}

/// # Safety
/// `model` was returned by this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn er_model_free(model: *mut ErModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` is a live handle or NULL (yields 0).
#[no_mangle]
pub unsafe extern "C" fn er_model_input_dim(model: *const ErModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim())
}

/// # Safety
/// `model` is a live handle or NULL (yields 0).
#[no_mangle]
pub unsafe extern "C" fn er_model_num_classes(model: *const ErModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Logits of one input, without dropout.
///
/// # Safety
/// `input` has `input_len` values and `logits` room for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn er_model_forward(
    model: *const ErModel,
    input: *const f64,
    input_len: usize,
    logits: *mut f64,
    logits_len: usize,
) -> ErStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let x = slice(input, input_len, "input")?;
        check_len(logits_len, m.num_classes(), "logits")?;
        let out = slice_mut(logits, logits_len, "logits")?;
        out.copy_from_slice(&nn::forward(m, x, None)?);
        Ok(())
    })
}

/// Bounded cross-entropy of one labelled input.
///
/// # Safety
/// `input` has `input_len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_model_loss(
    model: *const ErModel,
    input: *const f64,
    input_len: usize,
    label: usize,
    loss_bound: f64,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let x = slice(input, input_len, "input")?;
        let bound = BoundedLoss::new(loss_bound)?;
        let logits = nn::forward(m, x, None)?;
        write_out(
            out,
            nn::bounded_cross_entropy(&logits, label, bound)?,
            "out",
        )
    })
}

/// # Safety
/// Both paths are NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut ErDataset,
) -> ErStatus {
    guard(|| {
        let ds = data::load_idx(&path(images, "images")?, &path(labels, "labels")?)?;
        write_out(out, Box::into_raw(Box::new(ErDataset(ds))), "out")
    })
}

/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_dataset_synthetic(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    noise: f64,
    seed: u64,
    out: *mut *mut ErDataset,
) -> ErStatus {
    guard(|| {
        let ds = data::synthetic_blobs(BlobSpec {
            n,
            dim,
            classes,
            separation,
            noise,
            seed,
        })?;
        write_out(out, Box::into_raw(Box::new(ErDataset(ds))), "out")
    })
}

/// # Safety
/// `dataset` was returned by this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn er_dataset_free(dataset: *mut ErDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` is a live handle or NULL (yields 0).
#[no_mangle]
pub unsafe extern "C" fn er_dataset_len(dataset: *const ErDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` is a live handle or NULL (yields 0).
#[no_mangle]
pub unsafe extern "C" fn er_dataset_dim(dataset: *const ErDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.dim())
}

/// # Safety
/// `dataset` is a live handle or NULL (yields 0).
#[no_mangle]
pub unsafe extern "C" fn er_dataset_class_count(dataset: *const ErDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.class_count())
}

/// Linearized adversarial perturbation `Δs` of one sample.
///
/// # Safety
/// `sample` and `delta_out` have `len` values.
#[no_mangle]
pub unsafe extern "C" fn er_adversarial_perturbation(
    model: *const ErModel,
    sample: *const f64,
    len: usize,
    label: usize,
    norm: ErNorm,
    radius: f64,
    loss_bound: f64,
    delta_out: *mut f64,
) -> ErStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let s = slice(sample, len, "sample")?;
        let spec = PerturbationSpec::new(norm.into(), radius)?;
        let bound = BoundedLoss::new(loss_bound)?;
        let delta = robustness::adversarial_perturbation(m, s, label, spec, bound)?;
        slice_mut(delta_out, len, "delta_out")?.copy_from_slice(&delta);
        Ok(())
    })
}

/// Empirical ensemble robustness of `count` models over a dataset. When
/// `per_run_max` is not NULL it receives `count` per-model maxima.
///
/// # Safety
/// `models` holds `count` live handles; `per_run_max` is NULL or has room
/// for `count` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_ensemble_robustness(
    models: *const *const ErModel,
    count: usize,
    dataset: *const ErDataset,
    norm: ErNorm,
    radius: f64,
    loss_bound: f64,
    clamp_to_unit_box: bool,
    per_run_max: *mut f64,
    out: *mut ErRobustness,
) -> ErStatus {
    guard(|| {
        let handles = slice(models, count, "models")?;
        let ds = &deref(dataset, "dataset")?.0;
        let mut spec = PerturbationSpec::new(norm.into(), radius)?;
        spec.clamp_to_unit_box = clamp_to_unit_box;
        let bound = BoundedLoss::new(loss_bound)?;
        let mut maxima = Vec::with_capacity(count);
        for (t, &h) in handles.iter().enumerate() {
            let m = &deref(h, "model")?.0;
            if m.layer_dims() != deref(handles[0], "model")?.0.layer_dims() {
                return Err(Failure(
                    ErStatus::Protocol,
                    format!("model {t} has a different architecture than model 0"),
                ));
            }
            maxima.push(robustness::model_max_deviation(m, ds, spec, bound)?);
        }
        let est = RobustnessEstimate::from_per_run_max(maxima, spec)?;
        if !per_run_max.is_null() {
            slice_mut(per_run_max, count, "per_run_max")?.copy_from_slice(&est.per_run_max);
        }
        write_out(
            out,
            ErRobustness {
                epsilon_bar_emp: est.epsilon_bar_emp,
                variance_alpha: est.variance_alpha,
                t: est.t,
            },
            "out",
        )
    })
}

/// # Safety
/// `inputs` is readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn er_bound_theorem1(
    inputs: *const ErBoundInputs,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        write_out(
            out,
            bounds::theorem1_bound(&(*deref(inputs, "inputs")?).into())?,
            "out",
        )
    })
}

/// # Safety
/// `inputs` is readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn er_bound_corollary1(
    adv_empirical_mean: f64,
    inputs: *const ErBoundInputs,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let b: BoundInputs = (*deref(inputs, "inputs")?).into();
        write_out(
            out,
            bounds::corollary1_risk_bound(adv_empirical_mean, &b)?,
            "out",
        )
    })
}

/// # Safety
/// `inputs` is readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn er_bound_theorem2(
    inputs: *const ErBoundInputs,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        write_out(
            out,
            bounds::theorem2_bound(&(*deref(inputs, "inputs")?).into())?,
            "out",
        )
    })
}

/// # Safety
/// `inputs` is readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn er_bound_lemma1(inputs: *const ErBoundInputs, out: *mut f64) -> ErStatus {
    guard(|| {
        write_out(
            out,
            bounds::lemma1_bound(&(*deref(inputs, "inputs")?).into())?,
            "out",
        )
    })
}

/// # Safety
/// `inputs` is readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn er_bound_dropout(
    inputs: *const ErBoundInputs,
    form: ErDropoutForm,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let form = match form {
            ErDropoutForm::Stated => DropoutForm::Stated,
            ErDropoutForm::Proof => DropoutForm::Proof,
        };
        let b: BoundInputs = (*deref(inputs, "inputs")?).into();
        write_out(out, bounds::dropout_bound(&b, form)?, "out")
    })
}

/// # Safety
/// `xs` and `ys` have `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_pearson(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let r = analysis::pearson(slice(xs, len, "xs")?, slice(ys, len, "ys")?)?;
        write_out(out, r, "out")
    })
}

/// # Safety
/// `xs` and `ys` have `len` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn er_spearman(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let r = analysis::spearman(slice(xs, len, "xs")?, slice(ys, len, "ys")?)?;
        write_out(out, r, "out")
    })
}
