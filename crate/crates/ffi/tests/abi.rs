use std::ffi::{c_char, CStr, CString};
use std::ptr;

use unifuse::diffcore::ParamStore;
use unifuse::model::{DecodeRule, Inference, Model, ModelConfig, TaskSpec};
use unifuse::synthcorpus::{Corpus, CorpusConfig, Modality, SplitSizes};
use unifuse::fusion::TaskKind;
use unifuse::trainer::{save_checkpoint, CheckpointKind, CheckpointMeta};
use unifuse_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    corpus_dir: CString,
    corpus: Corpus,
    store: ParamStore,
    model: Model,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let sizes = SplitSizes { train: 3, val: 2, test: 4 };
    let corpus = Corpus::generate(5, &CorpusConfig { signed: sizes, spoken: sizes, text_only: 3, ..CorpusConfig::default() })
        .unwrap();
    corpus.write_to(&dir.path().join("corpus")).unwrap();
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &ModelConfig::default(), 5).unwrap();
    let meta = CheckpointMeta { model: ModelConfig::default(), stage: "x".into(), step: 0, kind: CheckpointKind::Last, val_accuracy: None };
    let path = dir.path().join("m.umck");
    save_checkpoint(&path, &store, &meta).unwrap();
    let (store, _, _) = unifuse::trainer::load_checkpoint(&path).unwrap();
    let ckpt = CString::new(path.to_str().unwrap()).unwrap();
    let corpus_dir = CString::new(dir.path().join("corpus").to_str().unwrap()).unwrap();
    Fixture { _dir: dir, ckpt, corpus_dir, corpus, store, model }
}

fn last_error() -> String {
    let need = unifuse_last_error(ptr::null_mut(), 0);
    let mut buf = vec![0 as c_char; need];
    unifuse_last_error(buf.as_mut_ptr(), buf.len());
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_and_vocab() {
    let v = unsafe { CStr::from_ptr(unifuse_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(unifuse_vocab_size(), 47);
    assert_eq!(unifuse_modality_dims(UnifuseModality::Audio), Modality::Audio.dims());
    let mut buf = [0 as c_char; 16];
    assert_eq!(unifuse_token_name(42, buf.as_mut_ptr(), buf.len()), 6);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "<eos>");
    let mut tiny = [0 as c_char; 3];
    unifuse_token_name(42, tiny.as_mut_ptr(), tiny.len());
    assert_eq!(unsafe { CStr::from_ptr(tiny.as_ptr()) }.to_str().unwrap(), "<e");
}

#[test]
fn metrics_match_the_library() {
    let r = [1u32, 2, 3, 4, 5];
    let h = [1u32, 2, 9, 4];
    let mut out = 0.0;
    unsafe {
        assert_eq!(unifuse_wer(r.as_ptr(), r.len(), h.as_ptr(), h.len(), &mut out), UnifuseStatus::Ok);
        assert!((out - 0.4).abs() < 1e-12);
        assert_eq!(unifuse_rouge_l(r.as_ptr(), r.len(), h.as_ptr(), h.len(), &mut out), UnifuseStatus::Ok);
        let (p, rc) = (3.0 / 4.0, 3.0 / 5.0);
        assert!((out - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        assert_eq!(unifuse_bleu4(r.as_ptr(), r.len(), r.as_ptr(), r.len(), &mut out), UnifuseStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);
        assert_eq!(unifuse_wer(ptr::null(), 0, h.as_ptr(), h.len(), &mut out), UnifuseStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(unifuse_wer(ptr::null(), 3, h.as_ptr(), h.len(), &mut out), UnifuseStatus::NullPointer);
        assert_eq!(last_error(), "reference is null");
        assert_eq!(unifuse_wer(r.as_ptr(), r.len(), h.as_ptr(), h.len(), ptr::null_mut()), UnifuseStatus::NullPointer);
    }
}

#[test]
fn load_errors_map_to_codes() {
    let mut m: *mut UnifuseModel = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.umck").unwrap();
    unsafe {
        assert_eq!(unifuse_model_load(missing.as_ptr(), &mut m), UnifuseStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("x.umck"));
        assert_eq!(unifuse_model_load(ptr::null(), &mut m), UnifuseStatus::NullPointer);
        unifuse_model_free(ptr::null_mut());
        unifuse_corpus_free(ptr::null_mut());
    }
}

#[test]
fn decoding_matches_the_library() {
    let f = fixture();
    let mut m: *mut UnifuseModel = ptr::null_mut();
    let mut c: *mut UnifuseCorpus = ptr::null_mut();
    unsafe {
        assert_eq!(unifuse_model_load(f.ckpt.as_ptr(), &mut m), UnifuseStatus::Ok);
        assert_eq!(unifuse_corpus_open(f.corpus_dir.as_ptr(), &mut c), UnifuseStatus::Ok);
    }
    let inf = Inference::new(&f.model, &f.store).unwrap();
    for (sample, task) in [(&f.corpus.spoken.test[0], UnifuseTask::Avsr), (&f.corpus.signed.test[1], UnifuseTask::Slt)] {
        let kind = if task == UnifuseTask::Slt { TaskKind::Slt } else { TaskKind::Avsr };
        let want = inf.decode(&sample.streams, TaskSpec::from(kind), DecodeRule::for_task(kind)).unwrap();
        let mut tokens = [0u32; 16];
        let (mut len, mut score) = (0usize, 0.0f64);
        let st = unsafe {
            unifuse_decode_sample(m, c, sample.id, task, ptr::null(), tokens.as_mut_ptr(), tokens.len(), &mut len, &mut score)
        };
        assert_eq!(st, UnifuseStatus::Ok);
        let got: Vec<usize> = tokens[..len].iter().map(|t| *t as usize).collect();
        assert_eq!(got, want.tokens);
        assert_eq!(score, want.score);

        // the same sample passed as raw streams
        let view = |m: Modality| {
            sample.stream(m).map(|s| UnifuseStream { frames: s.frames.data().as_ptr(), num_frames: s.num_frames() })
        };
        let (sg, lp, au) = (view(Modality::Sign), view(Modality::Lip), view(Modality::Audio));
        let p = |s: &Option<UnifuseStream>| s.as_ref().map_or(ptr::null(), |s| s as *const UnifuseStream);
        let mut raw = [0u32; 16];
        let mut raw_len = 0usize;
        let st = unsafe {
            unifuse_decode(m, task, p(&sg), p(&lp), p(&au), ptr::null(), raw.as_mut_ptr(), raw.len(), &mut raw_len, ptr::null_mut())
        };
        assert_eq!(st, UnifuseStatus::Ok);
        assert_eq!(&raw[..raw_len], &tokens[..len]);

        let mut refs = [0u32; 16];
        let mut ref_len = 0usize;
        let st = unsafe { unifuse_corpus_reference(c, sample.id, refs.as_mut_ptr(), refs.len(), &mut ref_len) };
        assert_eq!(st, UnifuseStatus::Ok);
        assert_eq!(refs[..ref_len].iter().map(|t| *t as usize).collect::<Vec<_>>(), sample.words());
    }

    let sample = &f.corpus.spoken.test[0];
    let mut len = 0usize;
    let opts = UnifuseDecodeOptions { greedy: false, beam_width: 0, temperature: 1.0, max_len: 4 };
    let mut buf = [0u32; 16];
    unsafe {
        let st = unifuse_decode_sample(m, c, sample.id, UnifuseTask::Asr, &opts, buf.as_mut_ptr(), buf.len(), &mut len, ptr::null_mut());
        assert_eq!(st, UnifuseStatus::InvalidArgument);
        let st = unifuse_decode_sample(m, c, 999_999, UnifuseTask::Asr, ptr::null(), buf.as_mut_ptr(), buf.len(), &mut len, ptr::null_mut());
        assert_eq!(st, UnifuseStatus::InvalidArgument);
        // VSR without a lip stream
        let st = unifuse_decode(m, UnifuseTask::Vsr, ptr::null(), ptr::null(), ptr::null(), ptr::null(), buf.as_mut_ptr(), buf.len(), &mut len, ptr::null_mut());
        assert_eq!(st, UnifuseStatus::InvalidArgument);
        let greedy = UnifuseDecodeOptions { greedy: true, beam_width: 0, temperature: 0.0, max_len: 12 };
        let st = unifuse_decode_sample(m, c, sample.id, UnifuseTask::Asr, &greedy, ptr::null_mut(), 0, &mut len, ptr::null_mut());
        let want = if len > 0 { UnifuseStatus::BufferTooSmall } else { UnifuseStatus::Ok };
        assert_eq!(st, want);
        unifuse_model_free(m);
        unifuse_corpus_free(c);
    }
    let d = unifuse_decode_options_default(UnifuseTask::Avsr);
    assert_eq!(d, UnifuseDecodeOptions { greedy: false, beam_width: 5, temperature: 0.3, max_len: 12 });
    assert!(unifuse_decode_options_default(UnifuseTask::Slt).greedy);
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/unifuse.h");
    for name in [
        "unifuse_model_load",
        "unifuse_model_free",
        "unifuse_decode",
        "unifuse_decode_sample",
        "unifuse_corpus_open",
        "unifuse_last_error",
        "unifuse_wer",
        "unifuse_bleu4",
        "unifuse_rouge_l",
        "typedef struct UnifuseModel UnifuseModel",
        "UNIFUSE_STATUS_NULL_POINTER = 5",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = env!("CARGO_MANIFEST_DIR");
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(format!("{dir}/include"))
            .arg(format!("{dir}/tests/c/smoke.c"))
            .output()
        else {
            eprintln!("{compiler} not found; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
