//! The full ablation suite for one seed: pretraining, the two-stage recipe,
//! joint training, the SLT modality arms, the ASR-focused dropout schedule
//! and the babble sweep.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{sweep_csv, SltScores, SweepRow, TestMetrics};
use crate::fusion::TaskKind;
use crate::pipeline::{
    gen_corpus, read_curves, write_file, write_json, Session, CURVES_FILE, FINAL_FILE, PRETRAINED_FILE, REPORT_FILE,
    SWEEP_FILE, TEST_REPORT_FILE,
};
use crate::trainer::{CurvePoint, DropoutSchedule, RunConfig};

pub const ASR_FOCUSED_STAGE: &str = "stage2-asr-focused";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResults {
    pub seed: u64,
    pub pretrain_perplexity: (f64, f64),
    pub two_stage: TestMetrics,
    pub joint: TestMetrics,
    pub asr_focused: TestMetrics,
    /// SLT scores keyed by arm name.
    pub slt_arms: BTreeMap<String, SltScores>,
    pub sweep: Vec<SweepRow>,
    pub joint_curves: Vec<CurvePoint>,
}

fn slt(m: &TestMetrics) -> SltScores {
    m.slt.clone().expect("SLT was evaluated")
}

/// Runs every arm for `seed` under `root/seed{seed}` and returns the test metrics.
pub fn run_seed(cfg: &RunConfig, seed: u64, root: &Path) -> Result<SeedResults> {
    let dir = root.join(format!("seed{seed}"));
    let corpus_dir = dir.join("corpus");
    gen_corpus(cfg, seed, &corpus_dir)?;
    let session = Session::open(cfg.clone(), &corpus_dir, seed)?;
    log::info!("seed {seed}: pretraining");
    let pre = session.pretrain(&dir.join("pretrain"))?;
    let pretrained = dir.join("pretrain").join(PRETRAINED_FILE);

    let train = |s: &Session, stage: &str, init: &Path, out: &str| -> Result<std::path::PathBuf> {
        log::info!("seed {seed}: training {out}");
        s.train(stage, Some(init), false, &dir.join(out))?;
        Ok(dir.join(out).join(FINAL_FILE))
    };
    let stage1 = train(&session, "stage1", &pretrained, "stage1")?;
    let stage2 = train(&session, "stage2", &stage1, "stage2")?;
    let joint = train(&session, "joint", &pretrained, "joint")?;
    let sign_only = train(&session, "slt-sign-only", &pretrained, "slt-sign-only")?;
    let sign_lip = train(&session, "slt-sign-lip", &pretrained, "slt-sign-lip")?;
    let sign_lip_vsr = train(&session, "slt-sign-lip-vsr", &pretrained, "slt-sign-lip-vsr")?;
    let focused_cfg = RunConfig { dropout: DropoutSchedule::ASR_FOCUSED, ..cfg.clone() };
    let focused_session = Session { cfg: focused_cfg, ..session };
    let focused = train(&focused_session, "stage2", &stage1, ASR_FOCUSED_STAGE)?;
    let session = Session { cfg: cfg.clone(), ..focused_session };

    log::info!("seed {seed}: evaluating");
    let eval = |ckpt: &Path, tasks: &[TaskKind], out: &str| -> Result<TestMetrics> {
        let (report, metrics) = session.evaluate(ckpt, tasks)?;
        write_json(&dir.join(out).join(TEST_REPORT_FILE), &report)?;
        Ok(metrics)
    };
    let two_stage = eval(&stage2, &TaskKind::ALL, "stage2")?;
    let joint_m = eval(&joint, &TaskKind::ALL, "joint")?;
    let focused_m = eval(&focused, &TaskKind::SPEECH, ASR_FOCUSED_STAGE)?;
    let mut slt_arms = BTreeMap::new();
    slt_arms.insert("slt-sign-only".to_string(), slt(&eval(&sign_only, &[TaskKind::Slt], "slt-sign-only")?));
    slt_arms.insert("slt-sign-lip".to_string(), slt(&eval(&sign_lip, &[TaskKind::Slt], "slt-sign-lip")?));
    slt_arms.insert("slt-sign-lip-vsr".to_string(), slt(&eval(&sign_lip_vsr, &[TaskKind::Slt], "slt-sign-lip-vsr")?));
    let sweep = session.sweep_noise(&stage2, &cfg.eval.snr_list)?;
    write_file(&dir.join("stage2").join(SWEEP_FILE), sweep_csv(&sweep.rows).as_bytes())?;

    let results = SeedResults {
        seed,
        pretrain_perplexity: (pre.perplexity_before, pre.perplexity_after),
        two_stage,
        joint: joint_m,
        asr_focused: focused_m,
        slt_arms,
        sweep: sweep.rows,
        joint_curves: read_curves(&dir.join("joint").join(CURVES_FILE))?,
    };
    write_json(&dir.join(REPORT_FILE), &results)?;
    Ok(results)
}
