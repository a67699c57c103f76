//! C ABI over the core library.
//!
//! Objects cross the boundary as opaque handles created by `mic_*_new`-style
//! constructors and released by the matching `*_free`. Every fallible call
//! returns a [`MicStatus`]; the message of the most recent failure on the
//! calling thread is available from [`mic_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};

use markov_icl::closed_form::{recover_pq_len2, xstar_len2_iid, Recovery};
use markov_icl::lsa::{
    read_checkpoint, train, write_checkpoint, FixedBatch, LsaModel, Optimizer, ParamForm,
    TrainConfig, TrainData,
};
use markov_icl::markov_data::{Prompt, PromptSampler};
use markov_icl::multiobjective::forward_equiv_check;
use markov_icl::reparam::ReparamVector;
use markov_icl::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    /// Overflow, divergence or a matrix that is not positive definite.
    Numerical = 4,
    Io = 5,
    Parse = 6,
    /// The target has no exact preimage; see `mic_recover_pq_len2`.
    NoRealPreimage = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Parameterization of a layer.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MicParamForm {
    Dense = 0,
    Sparse = 1,
    Restricted = 2,
}

impl From<MicParamForm> for ParamForm {
    fn from(f: MicParamForm) -> Self {
        match f {
            MicParamForm::Dense => ParamForm::Dense,
            MicParamForm::Sparse => ParamForm::Sparse,
            MicParamForm::Restricted => ParamForm::Restricted,
        }
    }
}

/// Opaque stack of LSA layers.
pub struct MicModel(LsaModel);

/// Opaque batch of prompts.
pub struct MicPromptBatch(Vec<Prompt>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MicStatus {
    match e {
        Error::ShapeMismatch(_) => MicStatus::ShapeMismatch,
        Error::InvalidKernel(_) | Error::InvalidDistribution(_) | Error::InvalidArgument(_) => {
            MicStatus::InvalidArgument
        }
        Error::NumericalOverflow(_)
        | Error::Diverged { .. }
        | Error::NotPositiveDefinite { .. } => MicStatus::Numerical,
        Error::Parse(_) | Error::Json(_) => MicStatus::Parse,
        Error::Io(_) => MicStatus::Io,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (MicStatus, String)>>(f: F) -> MicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MicStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside markov-icl");
            MicStatus::Panic
        }
    }
}

fn core<T>(r: markov_icl::Result<T>) -> Result<T, (MicStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MicStatus, String) {
    (MicStatus::NullPointer, format!("{what} is null"))
}

unsafe fn out_slice<'a>(
    ptr: *mut f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a mut [f64], (MicStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err((
            MicStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mic_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Sample `count` prompts of binary chains started from `Bern(p)` with
/// uniform kernels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_sample_binary(
    p: f64,
    d: usize,
    n: usize,
    count: usize,
    seed: u64,
    out: *mut *mut MicPromptBatch,
) -> MicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let sampler = core(PromptSampler::binary(p, d, n, seed))?;
        *out = Box::into_raw(Box::new(MicPromptBatch(sampler.batch(0, count))));
        Ok(())
    })
}

/// Build a batch from explicit chains. `chains` holds `count` prompts, each
/// `n + 1` chains of `d + 1` states, row-major; the last chain of each prompt
/// is the query and its last state is the label.
///
/// # Safety
/// `chains` must point to `count * (n + 1) * (d + 1)` readable values and
/// `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_from_chains(
    chains: *const u32,
    count: usize,
    n: usize,
    d: usize,
    states: usize,
    out: *mut *mut MicPromptBatch,
) -> MicStatus {
    guard(|| {
        if chains.is_null() {
            return Err(null("chains"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let per = (n + 1) * (d + 1);
        let data = std::slice::from_raw_parts(chains, count * per);
        let mut prompts = Vec::with_capacity(count);
        for block in data.chunks_exact(per.max(1)).take(count) {
            let rows: Vec<Vec<usize>> = block
                .chunks_exact(d + 1)
                .map(|c| c.iter().map(|&s| s as usize).collect())
                .collect();
            prompts.push(core(Prompt::from_chains(&rows, states))?);
        }
        *out = Box::into_raw(Box::new(MicPromptBatch(prompts)));
        Ok(())
    })
}

/// # Safety
/// `batch` must come from a `mic_prompt_batch_*` constructor and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_free(batch: *mut MicPromptBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

/// Number of prompts; 0 for a null handle.
///
/// # Safety
/// `batch` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_len(batch: *const MicPromptBatch) -> usize {
    batch.as_ref().map_or(0, |b| b.0.len())
}

/// Copy the query labels into `out`.
///
/// # Safety
/// `batch` must be a live handle and `out` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_labels(
    batch: *const MicPromptBatch,
    out: *mut f64,
    len: usize,
) -> MicStatus {
    guard(|| {
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        let dst = out_slice(out, len, b.0.len(), "out")?;
        for (o, p) in dst.iter_mut().zip(&b.0) {
            *o = p.label();
        }
        Ok(())
    })
}

/// Copy prompt `index`'s `(d+1) x (n+1)` input matrix, column-major.
///
/// # Safety
/// `batch` must be a live handle and `out` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn mic_prompt_batch_embedding(
    batch: *const MicPromptBatch,
    index: usize,
    out: *mut f64,
    len: usize,
) -> MicStatus {
    guard(|| {
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        let p = b.0.get(index).ok_or((
            MicStatus::InvalidArgument,
            format!("index {index} out of range for {} prompts", b.0.len()),
        ))?;
        let src = p.z().as_slice();
        out_slice(out, len, src.len(), "out")?.copy_from_slice(src);
        Ok(())
    })
}

/// A model with parameters drawn uniformly from `[-scale, scale]`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mic_model_random(
    form: MicParamForm,
    d: usize,
    n: usize,
    layers: usize,
    scale: f64,
    seed: u64,
    out: *mut *mut MicModel,
) -> MicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = core(LsaModel::random(form.into(), d, n, layers, scale, seed))?;
        *out = Box::into_raw(Box::new(MicModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `mic_model_*` constructor and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn mic_model_free(model: *mut MicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mic_model_num_params(model: *const MicModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_params())
}

/// Copy the flattened parameters into `out`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn mic_model_get_params(
    model: *const MicModel,
    out: *mut f64,
    len: usize,
) -> MicStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = m.0.to_vec();
        out_slice(out, len, v.len(), "out")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Overwrite the parameters from a flattened vector of exactly
/// `mic_model_num_params` values.
///
/// # Safety
/// `model` must be a live handle and `params` must hold `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn mic_model_set_params(
    model: *mut MicModel,
    params: *const f64,
    len: usize,
) -> MicStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if params.is_null() {
            return Err(null("params"));
        }
        core(m.0.set_from_slice(std::slice::from_raw_parts(params, len)))
    })
}

/// Predictions for every prompt of `batch`.
///
/// # Safety
/// `model` and `batch` must be live handles; `out` must hold `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn mic_model_predict(
    model: *const MicModel,
    batch: *const MicPromptBatch,
    out: *mut f64,
    len: usize,
) -> MicStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        let preds = core(m.0.predictions(&b.0))?;
        out_slice(out, len, preds.len(), "out")?.copy_from_slice(&preds);
        Ok(())
    })
}

/// Mean squared error over `batch`.
///
/// # Safety
/// `model` and `batch` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mic_model_loss(
    model: *const MicModel,
    batch: *const MicPromptBatch,
    out: *mut f64,
) -> MicStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(m.0.loss(&b.0))?;
        Ok(())
    })
}

/// Full-batch training with Adam (`adam != 0`) or plain gradient descent.
/// When `trace` is non-null it receives the loss before each of the
/// `iterations` updates.
///
/// # Safety
/// `model` and `batch` must be live handles; `trace` must be null or hold
/// `trace_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn mic_model_train(
    model: *mut MicModel,
    batch: *const MicPromptBatch,
    learning_rate: f64,
    iterations: usize,
    adam: i32,
    trace: *mut f64,
    trace_len: usize,
) -> MicStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        let dst = if trace.is_null() {
            None
        } else {
            Some(out_slice(trace, trace_len, iterations, "trace")?)
        };
        let cfg = TrainConfig {
            optimizer: if adam != 0 {
                Optimizer::adam()
            } else {
                Optimizer::Gd
            },
            learning_rate,
            iterations,
            parameter_form: m.0.form(),
            ..TrainConfig::default()
        };
        let losses = core(train(
            &mut m.0,
            &TrainData::Fixed(FixedBatch::new(b.0.clone())),
            &cfg,
        ))?;
        if let Some(dst) = dst {
            dst.copy_from_slice(&losses);
        }
        Ok(())
    })
}

unsafe fn path_of<'a>(path: *const c_char) -> Result<&'a str, (MicStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (MicStatus::InvalidArgument, "path is not UTF-8".to_string()))
}

/// Write a text checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mic_model_save(model: *const MicModel, path: *const c_char) -> MicStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_of(path)?;
        let f = File::create(path).map_err(|e| (MicStatus::Io, format!("{path}: {e}")))?;
        core(write_checkpoint(BufWriter::new(f), &m.0))
    })
}

/// Read a text checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable storage for one
/// handle.
#[no_mangle]
pub unsafe extern "C" fn mic_model_load(path: *const c_char, out: *mut *mut MicModel) -> MicStatus {
    guard(|| {
        let path = path_of(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let f = File::open(path).map_err(|e| (MicStatus::Io, format!("{path}: {e}")))?;
        let m = core(read_checkpoint(BufReader::new(f)))?;
        *out = Box::into_raw(Box::new(MicModel(m)));
        Ok(())
    })
}

/// Largest gap, over layers and prompts, between the forward pass of a
/// restricted model and its preconditioned weight recursion.
///
/// # Safety
/// `model` and `batch` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mic_forward_equiv_check(
    model: *const MicModel,
    batch: *const MicPromptBatch,
    out: *mut f64,
) -> MicStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let b = batch.as_ref().ok_or_else(|| null("batch"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut worst: f64 = 0.0;
        for p in &b.0 {
            worst = worst.max(core(forward_equiv_check(&m.0, p))?.max_deviation());
        }
        *out = worst;
        Ok(())
    })
}

/// Closed-form minimizer `(X1, X2, X3)` for length-2 chains.
///
/// # Safety
/// `out` must hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn mic_xstar_len2_iid(p: f64, n: usize, out: *mut f64) -> MicStatus {
    guard(|| {
        let x = core(xstar_len2_iid(p, n))?;
        out_slice(out, 3, 3, "out")?.copy_from_slice(x.as_vector().as_slice());
        Ok(())
    })
}

/// Exact `(b, A)` with `phi(b, A) = x` for `d = 1`. Returns
/// `NoRealPreimage` and writes the negative discriminant when none exists.
///
/// # Safety
/// `x` must hold 3 readable values, `b` and `a` 2 writable values each and
/// `discriminant` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn mic_recover_pq_len2(
    x: *const f64,
    b: *mut f64,
    a: *mut f64,
    discriminant: *mut f64,
) -> MicStatus {
    guard(|| {
        if x.is_null() {
            return Err(null("x"));
        }
        let v = std::slice::from_raw_parts(x, 3);
        let target = core(ReparamVector::new(1, v.to_vec().into()))?;
        match core(recover_pq_len2(&target))? {
            Recovery::Preimage(layer) => {
                let (bv, av) = layer
                    .sparse_parts()
                    .expect("recovery yields sparse parameters");
                out_slice(b, 2, 2, "b")?.copy_from_slice(bv.as_slice());
                out_slice(a, 2, 2, "a")?.copy_from_slice(av.as_slice());
                Ok(())
            }
            Recovery::NoRealPreimage { discriminant: disc } => {
                if !discriminant.is_null() {
                    *discriminant = disc;
                }
                Err((
                    MicStatus::NoRealPreimage,
                    format!("discriminant {disc} is negative"),
                ))
            }
        }
    })
}
