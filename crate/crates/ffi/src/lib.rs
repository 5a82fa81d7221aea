//! C ABI over the wabert toolkit.
//!
//! Every entry point returns a [`WabertStatus`]. On failure the message is
//! kept per thread and can be copied out with [`wabert_last_error`].
//! Models and corpora cross the boundary as opaque handles that must be
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use wabert::cif::{extract_boundaries, integrate_and_fire, scale_weights, AlignmentWeights, CifConfig, FrameSequence, TailPolicy};
use wabert::diffcore::Tensor;
use wabert::models::{inference_forward, GraftedModel, NUM_CLASSES};
use wabert::synthdata::{generate_utterances, load_corpus, SynthConfig, Utterance};
use wabert::train::evaluate_checkpoint;
use wabert::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WabertStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Numeric = 4,
    Alignment = 5,
    Io = 6,
    CorruptFile = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WabertTailPolicy {
    FireIfAtLeastHalf = 0,
    AlwaysFire = 1,
    Discard = 2,
}

/// Opaque trained model.
pub struct WabertModel(GraftedModel);

/// Opaque in-memory corpus.
pub struct WabertCorpus(Vec<Utterance>);

/// Evaluation summary. `recall_weighted` and `f1_weighted` are NaN and
/// `has_scores` is 0 when the model has no classifier.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct WabertMetrics {
    pub mae_ms: f64,
    pub median_ms: f64,
    pub acc_50: f64,
    pub acc_100: f64,
    pub acc_500: f64,
    pub acc_1000: f64,
    pub diagonality: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub top1: f64,
    pub top5: f64,
    pub utterances: usize,
    pub tokens: usize,
    pub has_scores: u8,
}

pub const WABERT_NUM_CLASSES: usize = 3;
const _: () = assert!(WABERT_NUM_CLASSES == NUM_CLASSES);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> WabertStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::DimensionMismatch(_) | Error::CountMismatch { .. } | Error::NonSquare { .. } => {
            WabertStatus::ShapeMismatch
        }
        Error::ZeroNormVector { .. }
        | Error::NonFiniteValue(_)
        | Error::NonFiniteComponent(_)
        | Error::DivergedLoss { .. }
        | Error::GradientMismatch { .. }
        | Error::DegenerateData(_) => WabertStatus::Numeric,
        Error::DegenerateWeights(_) | Error::EmptyOutput | Error::FiringCountMismatch { .. } => WabertStatus::Alignment,
        Error::Io { .. } => WabertStatus::Io,
        Error::CorruptFile { .. } => WabertStatus::CorruptFile,
        Error::Config(_) | Error::BadFractions(_) | Error::NonPositiveTemperature(_) => WabertStatus::Config,
        Error::IdOutOfRange { .. }
        | Error::TooShortInput { .. }
        | Error::DepthOutOfRange { .. }
        | Error::StepOutOfRange { .. }
        | Error::EmptyErrors => WabertStatus::InvalidArgument,
    }
}

struct Fail(WabertStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.module()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WabertStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WabertStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WabertStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(WabertStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(WabertStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn wabert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always nul-terminated when `cap > 0`) and returns the full length
/// including the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn wabert_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Runs integrate-and-fire on the weights `alpha[0..m]` and writes the
/// left and right boundary (ms) of each fired token. `target` > 0 rescales
/// the weights to sum to `target` first. `*n_tokens` always receives the
/// number of tokens; `WABERT_STATUS_BUFFER_TOO_SMALL` is returned if it
/// exceeds `cap`.
///
/// # Safety
/// `alpha` must be valid for `m` reads, `left_ms` and `right_ms` for `cap`
/// writes, and `n_tokens` for one write.
#[no_mangle]
pub unsafe extern "C" fn wabert_cif_boundaries(
    alpha: *const f64,
    m: usize,
    hop_ms: f64,
    beta: f64,
    tail: WabertTailPolicy,
    target: usize,
    left_ms: *mut f64,
    right_ms: *mut f64,
    cap: usize,
    n_tokens: *mut usize,
) -> WabertStatus {
    guard(|| {
        let alpha = slice_arg(alpha, m, "alpha")?;
        let n_out = out_arg(n_tokens, "n_tokens")?;
        if !(beta.is_finite() && beta > 0.0) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        let cfg = CifConfig {
            beta,
            tail_policy: match tail {
                WabertTailPolicy::FireIfAtLeastHalf => TailPolicy::FireIfAtLeastHalf,
                WabertTailPolicy::AlwaysFire => TailPolicy::AlwaysFire,
                WabertTailPolicy::Discard => TailPolicy::Discard,
            },
            ..CifConfig::default()
        };
        let frames = FrameSequence::new(Tensor::matrix(m, 1, vec![0.0; m])?, hop_ms, "ffi")?;
        let mut weights = AlignmentWeights::unscaled(alpha.to_vec());
        if target > 0 {
            weights = scale_weights(&weights, target)?;
        }
        let fired = integrate_and_fire(&frames, &weights, &cfg)?;
        let b = extract_boundaries(&fired, hop_ms);
        *n_out = b.len();
        if b.len() > cap {
            return Err(Fail(
                WabertStatus::BufferTooSmall,
                format!("{} tokens fired, buffer holds {cap}", b.len()),
            ));
        }
        if cap > 0 && (left_ms.is_null() || right_ms.is_null()) {
            return Err(null("left_ms/right_ms"));
        }
        for (i, e) in b.entries.iter().enumerate() {
            *left_ms.add(i) = e.left_ms;
            *right_ms.add(i) = e.right_ms;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `wabert train-align` or `finetune`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn wabert_model_load(path: *const c_char, out: *mut *mut WabertModel) -> WabertStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let model = GraftedModel::load(path)?;
        *out = Box::into_raw(Box::new(WabertModel(model)));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`wabert_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wabert_model_free(model: *mut WabertModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the graft depth and whether a classifier head is attached.
///
/// # Safety
/// `model` must be a live handle; the outputs valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn wabert_model_info(
    model: *const WabertModel,
    graft_depth: *mut usize,
    d_in: *mut usize,
    has_classifier: *mut u8,
) -> WabertStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        *out_arg(graft_depth, "graft_depth")? = m.graft_depth();
        *out_arg(d_in, "d_in")? = m.config.d_in;
        *out_arg(has_classifier, "has_classifier")? = m.classifier.is_some() as u8;
        Ok(())
    })
}

/// Runs inference on `raw` (`m_raw` rows of `d_in` features, row-major).
/// Writes up to `cap` predicted token ids and the total into `*n_tokens`.
/// `class_probs` (length `WABERT_NUM_CLASSES`) may be null; it is filled
/// only when the model has a classifier.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wabert_model_infer(
    model: *const WabertModel,
    raw: *const f64,
    m_raw: usize,
    d_in: usize,
    raw_hop_ms: f64,
    token_ids: *mut u32,
    cap: usize,
    n_tokens: *mut usize,
    class_probs: *mut f64,
) -> WabertStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let raw = slice_arg(raw, m_raw * d_in, "raw")?;
        let n_out = out_arg(n_tokens, "n_tokens")?;
        let inf = inference_forward(&Tensor::matrix(m_raw, d_in, raw.to_vec())?, raw_hop_ms, m)?;
        *n_out = inf.token_ids.len();
        if inf.token_ids.len() > cap {
            return Err(Fail(
                WabertStatus::BufferTooSmall,
                format!("{} tokens predicted, buffer holds {cap}", inf.token_ids.len()),
            ));
        }
        if cap > 0 && token_ids.is_null() {
            return Err(null("token_ids"));
        }
        for (i, &id) in inf.token_ids.iter().enumerate() {
            *token_ids.add(i) = id as u32;
        }
        if let (Some(p), false) = (inf.class_probs, class_probs.is_null()) {
            std::ptr::copy_nonoverlapping(p.as_ptr(), class_probs, NUM_CLASSES);
        }
        Ok(())
    })
}

/// Generates `count` synthetic utterances with default settings and `seed`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn wabert_corpus_generate(seed: u64, count: usize, out: *mut *mut WabertCorpus) -> WabertStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        *out = Box::into_raw(Box::new(WabertCorpus(generate_utterances(&cfg, count)?)));
        Ok(())
    })
}

/// Loads a corpus directory written by `wabert gen-data`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn wabert_corpus_load(dir: *const c_char, out: *mut *mut WabertCorpus) -> WabertStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(WabertCorpus(load_corpus(dir)?)));
        Ok(())
    })
}

/// Number of utterances, 0 for null.
///
/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wabert_corpus_len(corpus: *const WabertCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.0.len())
}

/// Releases a corpus; null is ignored.
///
/// # Safety
/// `corpus` must come from a corpus constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wabert_corpus_free(corpus: *mut WabertCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Evaluates `model` on every utterance of `corpus`.
///
/// # Safety
/// Handles must be live and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn wabert_evaluate(
    model: *const WabertModel,
    corpus: *const WabertCorpus,
    out: *mut WabertMetrics,
) -> WabertStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.0;
        let c = &ref_arg(corpus, "corpus")?.0;
        let out = out_arg(out, "out")?;
        let r = evaluate_checkpoint(c, m)?;
        *out = WabertMetrics {
            mae_ms: r.mae_ms,
            median_ms: r.median_ms,
            acc_50: r.acc_50,
            acc_100: r.acc_100,
            acc_500: r.acc_500,
            acc_1000: r.acc_1000,
            diagonality: r.diagonality,
            recall_weighted: r.recall_weighted.unwrap_or(f64::NAN),
            f1_weighted: r.f1_weighted.unwrap_or(f64::NAN),
            top1: r.top1,
            top5: r.top5,
            utterances: r.utterances,
            tokens: r.tokens,
            has_scores: r.f1_weighted.is_some() as u8,
        };
        Ok(())
    })
}
