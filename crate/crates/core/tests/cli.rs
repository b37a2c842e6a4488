mod common;

use std::fs;
use std::path::Path;

use unifuse::cli::run;
use unifuse::pipeline::{EvalReport, FINAL_FILE, PRETRAINED_FILE, REPORT_FILE, SWEEP_FILE};
use unifuse::synthcorpus::MANIFEST_FILE;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("unifuse").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_corpus_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_config(tmp.path(), &common::tiny_config());
    let out = tmp.path().join("data");
    assert_eq!(cli(&["gen-corpus", "--config", s(&cfg), "--seed", "1", "--out", s(&out)]), 0);
    assert!(out.join(MANIFEST_FILE).exists());
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"decoder": {"heads": 5}}"#).unwrap();
    assert_eq!(cli(&["gen-corpus", "--config", s(&bad), "--out", s(tmp.path())]), 1);
    fs::write(&bad, r#"{"not_a_section": 1}"#).unwrap();
    assert_eq!(cli(&["gen-corpus", "--config", s(&bad), "--out", s(tmp.path())]), 1);
    assert_eq!(cli(&["no-such-command"]), 1);
    assert_eq!(cli(&["gen-corpus", "--config", s(&tmp.path().join("missing.json")), "--out", "x"]), 2);
}

#[test]
fn stage2_without_stage1_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_config(tmp.path(), &common::tiny_config());
    let data = tmp.path().join("data");
    assert_eq!(cli(&["gen-corpus", "--config", s(&cfg), "--out", s(&data)]), 0);
    let out = tmp.path().join("run");
    assert_eq!(cli(&["train", "--config", s(&cfg), "--corpus", s(&data), "--stage", "2", "--out", s(&out)]), 1);
    assert!(!out.exists());
    assert_eq!(cli(&["train", "--config", s(&cfg), "--corpus", s(&data), "--stage", "bogus", "--out", s(&out)]), 1);
}

#[test]
fn unwritable_output_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cfg = common::write_config(tmp.path(), &common::tiny_config());
    assert_eq!(cli(&["gen-corpus", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]), 2);
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::write_config(tmp.path(), &common::tiny_config());
    let c = s(&cfg).to_string();
    let data = tmp.path().join("data");
    assert_eq!(cli(&["gen-corpus", "--config", &c, "--seed", "2", "--out", s(&data)]), 0);
    let d = s(&data).to_string();
    let pre = tmp.path().join("pre");
    assert_eq!(cli(&["pretrain-decoder", "--config", &c, "--seed", "2", "--corpus", &d, "--out", s(&pre)]), 0);
    let pre_ckpt = pre.join(PRETRAINED_FILE);
    let st1 = tmp.path().join("st1");
    let args = ["train", "--config", &c, "--seed", "2", "--corpus", &d, "--stage", "1", "--init", s(&pre_ckpt)];
    assert_eq!(cli(&[&args[..], &["--out", s(&st1)]].concat()), 0);
    // a pretrained decoder is not a stage-1 checkpoint
    let st2 = tmp.path().join("st2");
    let args2 = ["train", "--config", &c, "--seed", "2", "--corpus", &d, "--stage", "2"];
    assert_eq!(cli(&[&args2[..], &["--init", s(&pre_ckpt), "--out", s(&st2)]].concat()), 1);
    assert_eq!(cli(&[&args2[..], &["--init", s(&st1.join(FINAL_FILE)), "--out", s(&st2)]].concat()), 0);
    for f in ["best.umck", "last.umck", "final.umck", "curves.csv", "report.json"] {
        assert!(st2.join(f).exists(), "{f}");
    }
    let curves = fs::read_to_string(st2.join("curves.csv")).unwrap();
    assert!(curves.starts_with("stage,epoch,step,task,metric,value\n"));

    let ckpt = st2.join(FINAL_FILE);
    let ev = |out: &Path| cli(&["eval", "--config", &c, "--seed", "2", "--corpus", &d, "--task", "all", "--checkpoint", s(&ckpt), "--out", s(out)]);
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    assert_eq!(ev(&e1), 0);
    assert_eq!(ev(&e2), 0);
    let r1 = fs::read(e1.join(REPORT_FILE)).unwrap();
    assert_eq!(r1, fs::read(e2.join(REPORT_FILE)).unwrap());
    let report: EvalReport = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report.tasks.len(), 4);
    assert_eq!(report.provenance.seed, 2);
    assert_eq!(report.provenance.config_digest.len(), 64);

    let sw = tmp.path().join("sw");
    let code = cli(&["sweep-noise", "--config", &c, "--corpus", &d, "--checkpoint", s(&ckpt), "--snr-list", "-5,0,5", "--out", s(&sw)]);
    assert_eq!(code, 0);
    let rows = fs::read_to_string(sw.join(SWEEP_FILE)).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "task,snr_db,wer");
    assert_eq!(lines.len(), 1 + 3 * 3);
    let vsr: Vec<&str> = lines.iter().filter(|l| l.starts_with("VSR,")).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(vsr.windows(2).all(|w| w[0] == w[1]));

    let bad = cli(&["sweep-noise", "--config", &c, "--corpus", &d, "--checkpoint", s(&ckpt), "--snr-list", "a,b", "--out", s(&sw)]);
    assert_eq!(bad, 1);
    assert_eq!(cli(&["decode", "--config", &c, "--corpus", &d, "--checkpoint", s(&ckpt), "--input", "0"]), 0);
    assert_eq!(cli(&["decode", "--config", &c, "--corpus", &d, "--checkpoint", s(&ckpt), "--input", "999999"]), 1);
    let missing = tmp.path().join("none.umck");
    assert_eq!(cli(&["eval", "--config", &c, "--corpus", &d, "--checkpoint", s(&missing), "--out", s(&e1)]), 2);
}
