//! C ABI over `unifuse`: load a checkpoint, decode raw modality streams or
//! corpus samples, and score token sequences.
//!
//! Every fallible call returns a [`UnifuseStatus`]; on failure the message is
//! kept per thread and read back with [`unifuse_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unifuse::decoder::{token_name, BeamConfig, VOCAB_SIZE};
use unifuse::diffcore::{ParamStore, Tensor2};
use unifuse::fusion::TaskKind;
use unifuse::metrics::{bleu4, rouge_l, wer};
use unifuse::model::{DecodeRule, Inference, Model, TaskSpec};
use unifuse::synthcorpus::{Corpus, Modality, ModalityStream, Sample};
use unifuse::trainer::load_checkpoint;
use unifuse::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnifuseStatus {
    Ok = 0,
    Config = 1,
    Io = 2,
    Numeric = 3,
    InvalidArgument = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnifuseTask {
    Slt = 0,
    Vsr = 1,
    Asr = 2,
    Avsr = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnifuseModality {
    Sign = 0,
    Lip = 1,
    Audio = 2,
}

/// One modality stream: `num_frames` rows of `unifuse_modality_dims` values,
/// row-major. A null `frames` pointer means the stream is absent.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct UnifuseStream {
    pub frames: *const f64,
    pub num_frames: usize,
}

/// `greedy` ignores `beam_width` and `temperature`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnifuseDecodeOptions {
    pub greedy: bool,
    pub beam_width: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// A loaded checkpoint.
pub struct UnifuseModel {
    store: ParamStore,
    model: Model,
}

/// A loaded corpus directory.
pub struct UnifuseCorpus {
    corpus: Corpus,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|b| *b != 0));
    });
}

fn status_of(err: &Error) -> UnifuseStatus {
    match err {
        Error::Io { .. } | Error::Format { .. } => UnifuseStatus::Io,
        Error::Numeric(_) => UnifuseStatus::Numeric,
        Error::Config(_) | Error::Json(_) => UnifuseStatus::Config,
        _ => UnifuseStatus::InvalidArgument,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UnifuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UnifuseStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("{what} is null"));
            UnifuseStatus::NullPointer
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(&format!("output buffer too small: {need} entries needed"));
            UnifuseStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic");
            UnifuseStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer to a live, properly aligned T.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn c_path<'a>(p: *const c_char, what: &'static str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and, per the API contract, NUL-terminated.
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| Error::Argument(format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

fn task_kind(t: UnifuseTask) -> TaskKind {
    match t {
        UnifuseTask::Slt => TaskKind::Slt,
        UnifuseTask::Vsr => TaskKind::Vsr,
        UnifuseTask::Asr => TaskKind::Asr,
        UnifuseTask::Avsr => TaskKind::Avsr,
    }
}

fn modality(m: UnifuseModality) -> Modality {
    match m {
        UnifuseModality::Sign => Modality::Sign,
        UnifuseModality::Lip => Modality::Lip,
        UnifuseModality::Audio => Modality::Audio,
    }
}

fn rule(opts: Option<&UnifuseDecodeOptions>, task: TaskKind) -> Result<DecodeRule, Failure> {
    let Some(o) = opts else { return Ok(DecodeRule::for_task(task)) };
    if o.greedy {
        return Ok(DecodeRule::Greedy { max_len: o.max_len });
    }
    let cfg = BeamConfig { width: o.beam_width, temperature: o.temperature, max_len: o.max_len };
    cfg.validate()?;
    Ok(DecodeRule::Beam(cfg))
}

fn write_tokens(tokens: &[usize], out: *mut u32, cap: usize, len: *mut usize) -> Result<(), Failure> {
    if len.is_null() {
        return Err(Failure::Null("len"));
    }
    // SAFETY: checked non-null above; the caller owns the slot.
    unsafe { *len = tokens.len() };
    if tokens.len() > cap {
        return Err(Failure::Small(tokens.len()));
    }
    if !tokens.is_empty() {
        if out.is_null() {
            return Err(Failure::Null("tokens"));
        }
        for (i, t) in tokens.iter().enumerate() {
            // SAFETY: out has room for `cap` ≥ tokens.len() entries.
            unsafe { *out.add(i) = *t as u32 };
        }
    }
    Ok(())
}

fn token_slice<'a>(p: *const u32, n: usize, what: &'static str) -> Result<Vec<usize>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null with `n` readable entries per the API contract.
    let s: &'a [u32] = unsafe { std::slice::from_raw_parts(p, n) };
    Ok(s.iter().map(|t| *t as usize).collect())
}

fn copy_c_string(s: &[u8], buf: *mut c_char, cap: usize) -> usize {
    if !buf.is_null() && cap > 0 {
        let n = s.len().min(cap - 1);
        // SAFETY: buf has `cap` writable bytes; we write n + 1 ≤ cap.
        unsafe {
            ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
    }
    s.len() + 1
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unifuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns the full length plus one.
#[no_mangle]
pub extern "C" fn unifuse_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_c_string(&e.borrow(), buf, cap))
}

/// Channels per frame of a modality stream.
#[no_mangle]
pub extern "C" fn unifuse_modality_dims(m: UnifuseModality) -> usize {
    modality(m).dims()
}

#[no_mangle]
pub extern "C" fn unifuse_vocab_size() -> usize {
    VOCAB_SIZE
}

/// Writes a token's display name (e.g. `w3`, `<eos>`); returns the full length plus one.
#[no_mangle]
pub extern "C" fn unifuse_token_name(token: u32, buf: *mut c_char, cap: usize) -> usize {
    copy_c_string(token_name(token as usize).as_bytes(), buf, cap)
}

/// Greedy for SLT, width-5 beam at temperature 0.3 otherwise, up to 12 tokens.
#[no_mangle]
pub extern "C" fn unifuse_decode_options_default(task: UnifuseTask) -> UnifuseDecodeOptions {
    match DecodeRule::for_task(task_kind(task)) {
        DecodeRule::Greedy { max_len } => {
            let b = BeamConfig::default();
            UnifuseDecodeOptions { greedy: true, beam_width: b.width, temperature: b.temperature, max_len }
        }
        DecodeRule::Beam(b) => {
            UnifuseDecodeOptions { greedy: false, beam_width: b.width, temperature: b.temperature, max_len: b.max_len }
        }
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn unifuse_model_load(path: *const c_char, out: *mut *mut UnifuseModel) -> UnifuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = c_path(path, "path")?;
        let (store, meta, _) = load_checkpoint(path)?;
        let model = Model::bind(&store, &meta.model)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(UnifuseModel { store, model })) };
        Ok(())
    })
}

/// # Safety
/// `model` must come from `unifuse_model_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unifuse_model_free(model: *mut UnifuseModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

fn stream(s: Option<&UnifuseStream>, m: Modality) -> Result<Option<ModalityStream>, Failure> {
    let Some(s) = s.filter(|s| !s.frames.is_null()) else { return Ok(None) };
    let n = s.num_frames * m.dims();
    // SAFETY: non-null with num_frames × dims readable values per the API contract.
    let data = unsafe { std::slice::from_raw_parts(s.frames, n) }.to_vec();
    Ok(Some(ModalityStream::new(m, Tensor2::from_vec(s.num_frames, m.dims(), data)?)))
}

fn decode_streams(
    model: &UnifuseModel,
    streams: &[ModalityStream],
    task: TaskKind,
    opts: Option<&UnifuseDecodeOptions>,
) -> Result<(Vec<usize>, f64), Failure> {
    let inf = Inference::new(&model.model, &model.store)?;
    let hyp = inf.decode(streams, TaskSpec::from(task), rule(opts, task)?)?;
    Ok((hyp.tokens, hyp.score))
}

fn finish(result: (Vec<usize>, f64), tokens: *mut u32, cap: usize, len: *mut usize, score: *mut f64) -> Result<(), Failure> {
    if !score.is_null() {
        // SAFETY: checked non-null.
        unsafe { *score = result.1 };
    }
    write_tokens(&result.0, tokens, cap, len)
}

/// Decodes raw streams for `task`. Streams the task masks may be absent.
/// `opts` may be null for the task's default rule. On `BufferTooSmall`,
/// `*len` still holds the required token count.
///
/// # Safety
/// Pointers must be null or valid for the sizes they describe.
#[no_mangle]
pub unsafe extern "C" fn unifuse_decode(
    model: *const UnifuseModel,
    task: UnifuseTask,
    sign: *const UnifuseStream,
    lip: *const UnifuseStream,
    audio: *const UnifuseStream,
    opts: *const UnifuseDecodeOptions,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
    score: *mut f64,
) -> UnifuseStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let mut streams = Vec::new();
        // SAFETY (as_ref): each pointer is null or points to a live UnifuseStream.
        for (p, m) in [(sign, Modality::Sign), (lip, Modality::Lip), (audio, Modality::Audio)] {
            if let Some(s) = stream(unsafe { p.as_ref() }, m)? {
                streams.push(s);
            }
        }
        let r = decode_streams(model, &streams, task_kind(task), unsafe { opts.as_ref() })?;
        finish(r, tokens, cap, len, score)
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn unifuse_corpus_open(dir: *const c_char, out: *mut *mut UnifuseCorpus) -> UnifuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let (corpus, _) = Corpus::load(c_path(dir, "dir")?)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(UnifuseCorpus { corpus })) };
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from `unifuse_corpus_open` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unifuse_corpus_free(corpus: *mut UnifuseCorpus) {
    if !corpus.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(corpus) });
    }
}

fn find(corpus: &UnifuseCorpus, id: u32) -> Result<&Sample, Failure> {
    let c = &corpus.corpus;
    c.signed
        .train
        .iter()
        .chain(&c.signed.val)
        .chain(&c.signed.test)
        .chain(&c.spoken.train)
        .chain(&c.spoken.val)
        .chain(&c.spoken.test)
        .find(|s| s.id == id)
        .ok_or_else(|| Failure::Core(Error::Argument(format!("no sample with id {id}"))))
}

/// Writes the reference transcript of sample `id`.
///
/// # Safety
/// `tokens` must have room for `cap` entries; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unifuse_corpus_reference(
    corpus: *const UnifuseCorpus,
    id: u32,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
) -> UnifuseStatus {
    guard(|| write_tokens(&find(non_null(corpus, "corpus")?, id)?.words(), tokens, cap, len))
}

/// Decodes corpus sample `id` for `task`.
///
/// # Safety
/// As for `unifuse_decode`.
#[no_mangle]
pub unsafe extern "C" fn unifuse_decode_sample(
    model: *const UnifuseModel,
    corpus: *const UnifuseCorpus,
    id: u32,
    task: UnifuseTask,
    opts: *const UnifuseDecodeOptions,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
    score: *mut f64,
) -> UnifuseStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let sample = find(non_null(corpus, "corpus")?, id)?;
        // SAFETY: opts is null or points to live options.
        let r = decode_streams(model, &sample.streams, task_kind(task), unsafe { opts.as_ref() })?;
        finish(r, tokens, cap, len, score)
    })
}

type Metric = fn(&[Vec<usize>], &[Vec<usize>]) -> unifuse::Result<f64>;

fn score_pair(metric: Metric, r: *const u32, rn: usize, h: *const u32, hn: usize, out: *mut f64) -> UnifuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let refs = vec![token_slice(r, rn, "reference")?];
        let hyps = vec![token_slice(h, hn, "hypothesis")?];
        let v = metric(&refs, &hyps)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// Word error rate of one hypothesis against one reference.
///
/// # Safety
/// `reference`/`hypothesis` must hold the stated number of entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unifuse_wer(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut f64,
) -> UnifuseStatus {
    score_pair(wer::<usize>, reference, reference_len, hypothesis, hypothesis_len, out)
}

/// BLEU-4 of a single sentence pair (corpus BLEU over one sentence).
///
/// # Safety
/// As for `unifuse_wer`.
#[no_mangle]
pub unsafe extern "C" fn unifuse_bleu4(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut f64,
) -> UnifuseStatus {
    score_pair(bleu4::<usize>, reference, reference_len, hypothesis, hypothesis_len, out)
}

/// ROUGE-L F1 of a single sentence pair.
///
/// # Safety
/// As for `unifuse_wer`.
#[no_mangle]
pub unsafe extern "C" fn unifuse_rouge_l(
    reference: *const u32,
    reference_len: usize,
    hypothesis: *const u32,
    hypothesis_len: usize,
    out: *mut f64,
) -> UnifuseStatus {
    score_pair(rouge_l::<usize>, reference, reference_len, hypothesis, hypothesis_len, out)
}
