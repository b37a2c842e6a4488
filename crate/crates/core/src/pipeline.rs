//! File-level workflow shared by the CLI and the experiment suite: every step
//! reads and writes checkpoints and reports so runs can be resumed and audited.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::token_name;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::eval::{self, SltScores, SweepRow, TestMetrics};
use crate::fusion::TaskKind;
use crate::model::{Inference, Model, TaskSpec};
use crate::synthcorpus::{Corpus, CorpusManifest, Sample};
use crate::trainer::{
    curves_csv, lm_perplexity, load_checkpoint, pretrain_lm, quantize_f32, run_stage, save_checkpoint, select_final,
    CheckpointKind, CheckpointMeta, CurvePoint, RunConfig, SelectionMetrics, Snapshot, StageConfig, TrainContext,
};

pub const PRETRAINED_FILE: &str = "pretrained.umck";
pub const BEST_FILE: &str = "best.umck";
pub const LAST_FILE: &str = "last.umck";
pub const FINAL_FILE: &str = "final.umck";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const SWEEP_FILE: &str = "snr_sweep.csv";
pub const TEST_REPORT_FILE: &str = "test_report.json";

/// Identifies exactly what produced a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub corpus_digest: String,
    pub seed: u64,
}

/// A loaded corpus directory plus the run configuration.
pub struct Session {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub manifest: CorpusManifest,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub file: String,
    pub sha256: String,
    pub stage: String,
    pub step: usize,
    pub kind: CheckpointKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

impl CheckpointRecord {
    fn new(path: &Path, sha256: String, meta: &CheckpointMeta) -> Self {
        CheckpointRecord {
            file: path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
            sha256,
            stage: meta.stage.clone(),
            step: meta.step,
            kind: meta.kind,
            val_accuracy: meta.val_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub provenance: Provenance,
    pub steps: usize,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub final_loss: f64,
    pub checkpoint: CheckpointRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub provenance: Provenance,
    pub stage: StageConfig,
    pub init: Option<CheckpointRecord>,
    pub best: CheckpointRecord,
    pub last: CheckpointRecord,
    pub best_val: SelectionMetrics,
    pub last_val: SelectionMetrics,
    pub chosen: CheckpointKind,
    pub final_checkpoint: CheckpointRecord,
}

/// Per-task test scores as written to `report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merged_confusion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub checkpoint: CheckpointRecord,
    pub tasks: BTreeMap<TaskKind, TaskReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub provenance: Provenance,
    pub checkpoint: CheckpointRecord,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub provenance: Provenance,
    pub checkpoint: String,
    pub sample: u32,
    pub task: TaskKind,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub score: f64,
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_corpus(cfg: &RunConfig, seed: u64, out: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    Corpus::generate(seed, &cfg.corpus)?.write_to(out)
}

fn words(tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|t| token_name(*t)).collect()
}

impl Session {
    pub fn open(cfg: RunConfig, corpus_dir: &Path, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (corpus, manifest) = Corpus::load(corpus_dir)?;
        Ok(Session { cfg, corpus, manifest, seed })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_digest: self.cfg.digest(), corpus_digest: self.manifest.corpus_digest(), seed: self.seed }
    }

    fn held_out_text(&self) -> Vec<Vec<usize>> {
        self.corpus.signed.val.iter().chain(&self.corpus.spoken.val).map(|s| s.words()).collect()
    }

    /// Language-model pretraining of a freshly initialized model.
    pub fn pretrain(&self, out: &Path) -> Result<PretrainReport> {
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &self.cfg.model(), self.seed)?;
        let held = self.held_out_text();
        let before = lm_perplexity(&store, &model, &held)?;
        let losses = pretrain_lm(&mut store, &model, &self.corpus.text, &self.cfg.pretrain, self.cfg.optimizer, self.seed)?;
        let final_loss = *losses.last().expect("at least one step");
        if !final_loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss became {final_loss}")));
        }
        quantize_f32(&mut store);
        let after = lm_perplexity(&store, &model, &held)?;
        let meta = CheckpointMeta {
            model: self.cfg.model(),
            stage: "pretrain".into(),
            step: losses.len(),
            kind: CheckpointKind::Pretrained,
            val_accuracy: None,
        };
        let path = out.join(PRETRAINED_FILE);
        let digest = save_checkpoint(&path, &store, &meta)?;
        let report = PretrainReport {
            provenance: self.provenance(),
            steps: losses.len(),
            perplexity_before: before,
            perplexity_after: after,
            final_loss,
            checkpoint: CheckpointRecord::new(&path, digest, &meta),
        };
        write_json(&out.join(REPORT_FILE), &report)?;
        Ok(report)
    }

    fn load_model(&self, path: &Path) -> Result<(ParamStore, Model, CheckpointMeta, String)> {
        let (store, meta, digest) = load_checkpoint(path)?;
        if meta.model != self.cfg.model() {
            return Err(Error::Config(format!(
                "checkpoint {} was built with a different model configuration",
                path.display()
            )));
        }
        let model = Model::bind(&store, &meta.model)?;
        Ok((store, model, meta, digest))
    }

    /// Stage-specific SLT modality mask, looked up by the checkpoint's stage name.
    fn slt_spec(&self, stage: &str) -> TaskSpec {
        let mask = self.cfg.stage(stage).map_or(TaskKind::Slt.mask(), |s| s.slt_mask);
        TaskSpec { task: TaskKind::Slt, mask }
    }

    fn selection(&self, model: &Model, snap: &Snapshot, stage: &StageConfig) -> Result<SelectionMetrics> {
        let tasks = stage.mix(&self.cfg.dropout).tasks();
        eval::selection_metrics(
            model,
            &snap.store,
            &self.corpus.lexicon,
            &self.corpus.signed.val,
            &self.corpus.spoken.val,
            &tasks,
            TaskSpec { task: TaskKind::Slt, mask: stage.slt_mask },
            &self.cfg.eval,
        )
    }

    /// Runs one training stage from `init` (or from fresh parameters when
    /// `from_scratch` is set and no init is given) and writes its outputs.
    pub fn train(&self, stage_name: &str, init: Option<&Path>, from_scratch: bool, out: &Path) -> Result<TrainReport> {
        let stage = self.cfg.stage(stage_name)?;
        stage.validate(&self.cfg.dropout)?;
        let (mut store, model, init_record) = match init {
            Some(path) => {
                let (store, model, meta, digest) = self.load_model(path)?;
                if stage.requires_init && meta.kind == CheckpointKind::Pretrained && !from_scratch {
                    return Err(Error::Config(format!(
                        "stage {} continues an earlier training stage; {} is a pretrained decoder (pass --from-scratch to allow)",
                        stage.name,
                        path.display()
                    )));
                }
                (store, model, Some(CheckpointRecord::new(path, digest, &meta)))
            }
            None if stage.requires_init && !from_scratch => {
                return Err(Error::Config(format!(
                    "stage {} needs --init with an earlier stage's checkpoint (or --from-scratch)",
                    stage.name
                )))
            }
            None => {
                log::warn!("stage {} starts from random parameters without a pretrained decoder", stage.name);
                let mut store = ParamStore::new();
                let model = Model::register(&mut store, &self.cfg.model(), self.seed)?;
                quantize_f32(&mut store);
                (store, model, None)
            }
        };
        let ctx = TrainContext { corpus: &self.corpus, cfg: &self.cfg, seed: self.seed };
        let outcome = run_stage(&mut store, &model, &ctx, &stage)?;
        let mut best = outcome.best;
        let mut last = outcome.last;
        quantize_f32(&mut best.store);
        quantize_f32(&mut last.store);
        let best_val = self.selection(&model, &best, &stage)?;
        let last_val = self.selection(&model, &last, &stage)?;
        let chosen = select_final(&best_val, &last_val);
        let best_path = out.join(BEST_FILE);
        let last_path = out.join(LAST_FILE);
        let final_path = out.join(FINAL_FILE);
        let best_digest = save_checkpoint(&best_path, &best.store, &best.meta)?;
        let last_digest = save_checkpoint(&last_path, &last.store, &last.meta)?;
        let pick = if chosen == CheckpointKind::Best { &best } else { &last };
        let final_digest = save_checkpoint(&final_path, &pick.store, &pick.meta)?;
        write_file(&out.join(CURVES_FILE), curves_csv(&outcome.curves).as_bytes())?;
        let report = TrainReport {
            provenance: self.provenance(),
            stage,
            init: init_record,
            best: CheckpointRecord::new(&best_path, best_digest, &best.meta),
            last: CheckpointRecord::new(&last_path, last_digest, &last.meta),
            best_val,
            last_val,
            chosen,
            final_checkpoint: CheckpointRecord::new(&final_path, final_digest, &pick.meta),
        };
        write_json(&out.join(REPORT_FILE), &report)?;
        Ok(report)
    }

    /// Test-set scores of a checkpoint on `tasks`.
    pub fn evaluate(&self, checkpoint: &Path, tasks: &[TaskKind]) -> Result<(EvalReport, TestMetrics)> {
        if tasks.is_empty() {
            return Err(Error::Argument("no tasks to evaluate".into()));
        }
        let (store, model, meta, digest) = self.load_model(checkpoint)?;
        let metrics = eval::evaluate(
            &model,
            &store,
            &self.corpus.lexicon,
            &self.corpus.signed.test,
            &self.corpus.spoken.test,
            tasks,
            self.slt_spec(&meta.stage),
            &self.cfg.eval,
        )?;
        let mut reports = BTreeMap::new();
        for (task, wer) in &metrics.wer {
            let samples = eval::limit(&self.corpus.spoken.test, self.cfg.eval.test_limit).len();
            reports.insert(*task, TaskReport { samples, wer: Some(*wer), ..TaskReport::default() });
        }
        if let Some(SltScores { bleu4, rouge_l, merged_confusion, samples }) = metrics.slt.clone() {
            reports.insert(
                TaskKind::Slt,
                TaskReport {
                    samples,
                    bleu4: Some(bleu4),
                    rouge_l: Some(rouge_l),
                    merged_confusion: Some(merged_confusion),
                    ..TaskReport::default()
                },
            );
        }
        let report = EvalReport {
            provenance: self.provenance(),
            checkpoint: CheckpointRecord::new(checkpoint, digest, &meta),
            tasks: reports,
        };
        Ok((report, metrics))
    }

    pub fn sweep_noise(&self, checkpoint: &Path, snrs: &[f64]) -> Result<SweepReport> {
        if snrs.is_empty() || snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Argument("SNR list must be non-empty and finite".into()));
        }
        let (store, model, meta, digest) = self.load_model(checkpoint)?;
        let inf = Inference::new(&model, &store)?;
        let test = eval::limit(&self.corpus.spoken.test, self.cfg.eval.test_limit);
        let rows = eval::snr_sweep(&inf, test, snrs, self.seed, &self.cfg.eval)?;
        Ok(SweepReport { provenance: self.provenance(), checkpoint: CheckpointRecord::new(checkpoint, digest, &meta), rows })
    }

    pub fn find_sample(&self, id: u32) -> Result<&Sample> {
        let all = [&self.corpus.signed, &self.corpus.spoken];
        all.iter()
            .flat_map(|s| s.train.iter().chain(&s.val).chain(&s.test))
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Argument(format!("no sample with id {id} in the corpus")))
    }

    pub fn decode(&self, checkpoint: &Path, id: u32, task: TaskKind) -> Result<DecodeReport> {
        let (store, model, meta, digest) = self.load_model(checkpoint)?;
        let sample = self.find_sample(id)?;
        let spec = if task == TaskKind::Slt { self.slt_spec(&meta.stage) } else { task.into() };
        let inf = Inference::new(&model, &store)?;
        let hyp = inf.decode(&sample.streams, spec, eval::decode_rule(&self.cfg.eval, task))?;
        Ok(DecodeReport {
            provenance: self.provenance(),
            checkpoint: digest,
            sample: id,
            task,
            reference: words(&sample.words()),
            hypothesis: words(&hyp.tokens),
            score: hyp.score,
        })
    }
}

/// Default task for a sample: SLT for signed samples, AVSR for spoken ones.
pub fn default_task(sample: &Sample) -> TaskKind {
    match sample.tag {
        crate::synthcorpus::CorpusTag::Signed => TaskKind::Slt,
        _ => TaskKind::Avsr,
    }
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format("curves.csv", format!("line {}: {line}", i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(CurvePoint {
            stage: f[0].into(),
            epoch: f[1].parse().map_err(|_| bad())?,
            step: f[2].parse().map_err(|_| bad())?,
            task: f[3].into(),
            metric: f[4].into(),
            value: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
