use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::sampler::{DropoutSchedule, TaskMix};
use super::schedule::TriStage;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ModalityMask, TaskKind};
use crate::model::ModelConfig;
use crate::decoder::DecoderConfig;
use crate::synthcorpus::{CorpusConfig, TRAIN_SNR_DB};

/// Babble mixing applied to ASR/AVSR batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    pub prob: f64,
    pub snr_db: Vec<f64>,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self { prob: 0.75, snr_db: TRAIN_SNR_DB.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub schedule: TriStage,
    pub batch_size: usize,
    /// Probability that a batch is a signed-corpus SLT batch.
    pub signed_fraction: f64,
    /// Spoken-task distribution; `None` uses the run-level dropout schedule.
    pub spoken: Option<DropoutSchedule>,
    /// Modality blocks SLT batches keep (the sign-only ablation drops lip).
    pub slt_mask: ModalityMask,
    pub noise: Option<NoisePolicy>,
    pub word_drop: bool,
    pub eval_every: usize,
    /// Whether the stage must start from an earlier stage's checkpoint.
    pub requires_init: bool,
}

impl StageConfig {
    fn base(name: &str, schedule: TriStage) -> Self {
        StageConfig {
            name: name.into(),
            schedule,
            batch_size: 16,
            signed_fraction: 0.5,
            spoken: None,
            slt_mask: TaskKind::Slt.mask(),
            noise: None,
            word_drop: true,
            eval_every: 200,
            requires_init: false,
        }
    }

    fn stage1_schedule() -> TriStage {
        TriStage { warmup: 300, hold: 300, decay: 1800, peak: 3e-3, floor_ratio: 0.01 }
    }

    fn stage2_schedule() -> TriStage {
        TriStage { warmup: 50, hold: 0, decay: 1950, peak: 3e-3, floor_ratio: 0.01 }
    }

    /// Visual tasks only: SLT and VSR, half the batches each.
    pub fn stage1() -> Self {
        StageConfig { spoken: Some(DropoutSchedule::VSR_ONLY), ..Self::base("stage1", Self::stage1_schedule()) }
    }

    /// All four tasks with modality-dropout sampling and babble noise, from a stage-1 model.
    pub fn stage2() -> Self {
        StageConfig {
            noise: Some(NoisePolicy::default()),
            requires_init: true,
            ..Self::base("stage2", Self::stage2_schedule())
        }
    }

    /// The stage-2 recipe started from scratch.
    pub fn joint() -> Self {
        StageConfig { noise: Some(NoisePolicy::default()), ..Self::base("joint", Self::stage2_schedule()) }
    }

    /// One task only, stage-2 schedule from scratch.
    pub fn single(task: TaskKind) -> Self {
        let name = format!("single-{}", task.name().to_ascii_lowercase());
        let mut s = Self::base(&name, Self::stage2_schedule());
        if task == TaskKind::Slt {
            s.signed_fraction = 1.0;
        } else {
            s.signed_fraction = 0.0;
            let mut d = DropoutSchedule { vsr: 0.0, asr: 0.0, avsr: 0.0 };
            match task {
                TaskKind::Vsr => d.vsr = 1.0,
                TaskKind::Asr => d.asr = 1.0,
                _ => d.avsr = 1.0,
            }
            s.spoken = Some(d);
            if task != TaskKind::Vsr {
                s.noise = Some(NoisePolicy::default());
            }
        }
        s
    }

    /// SLT from the sign stream alone.
    pub fn slt_sign_only() -> Self {
        StageConfig {
            signed_fraction: 1.0,
            spoken: Some(DropoutSchedule::VSR_ONLY),
            slt_mask: ModalityMask { sign: true, lip: false, audio: false },
            ..Self::base("slt-sign-only", Self::stage1_schedule())
        }
    }

    /// SLT from sign and lip streams.
    pub fn slt_sign_lip() -> Self {
        StageConfig {
            signed_fraction: 1.0,
            spoken: Some(DropoutSchedule::VSR_ONLY),
            ..Self::base("slt-sign-lip", Self::stage1_schedule())
        }
    }

    /// SLT from sign and lip plus the VSR loss: the stage-1 recipe run twice as
    /// long, so it sees as many SLT batches as the SLT-only arms.
    pub fn slt_sign_lip_vsr() -> Self {
        let s = Self::stage1_schedule();
        let schedule = TriStage { warmup: 2 * s.warmup, hold: 2 * s.hold, decay: 2 * s.decay, ..s };
        StageConfig { name: "slt-sign-lip-vsr".into(), schedule, ..Self::stage1() }
    }

    /// Resolves a CLI stage name.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "1" | "stage1" => Self::stage1(),
            "2" | "stage2" => Self::stage2(),
            "joint" => Self::joint(),
            "slt-sign-only" => Self::slt_sign_only(),
            "slt-sign-lip" => Self::slt_sign_lip(),
            "slt-sign-lip-vsr" => Self::slt_sign_lip_vsr(),
            other => match other.strip_prefix("single:") {
                Some(t) => Self::single(t.parse()?),
                None => {
                    return Err(Error::Argument(format!(
                        "unknown stage '{other}' (expected 1, 2, joint, single:TASK, slt-sign-only, slt-sign-lip, slt-sign-lip-vsr)"
                    )))
                }
            },
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn mix(&self, run_dropout: &DropoutSchedule) -> TaskMix {
        TaskMix { signed_fraction: self.signed_fraction, spoken: self.spoken.unwrap_or(*run_dropout) }
    }

    pub fn validate(&self, run_dropout: &DropoutSchedule) -> Result<()> {
        self.schedule.validate().map_err(|e| Error::Config(format!("stages[{}].schedule: {e}", self.name)))?;
        if self.batch_size == 0 {
            return Err(Error::Config(format!("stages[{}].batch_size must be positive", self.name)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config(format!("stages[{}].eval_every must be positive", self.name)));
        }
        self.mix(run_dropout).validate().map_err(|e| Error::Config(format!("stages[{}]: {e}", self.name)))?;
        if !self.slt_mask.sign && !self.slt_mask.lip {
            return Err(Error::Config(format!("stages[{}].slt_mask must keep sign or lip", self.name)));
        }
        if self.slt_mask.audio {
            return Err(Error::Config(format!("stages[{}].slt_mask cannot keep audio", self.name)));
        }
        if let Some(n) = &self.noise {
            if !(0.0..=1.0).contains(&n.prob) || n.snr_db.is_empty() || n.snr_db.iter().any(|s| !s.is_finite()) {
                return Err(Error::Config(format!("stages[{}].noise is invalid", self.name)));
            }
        }
        Ok(())
    }
}

/// Language-model pretraining of the base decoder on the text-only split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub schedule: TriStage,
    pub batch_size: usize,
    /// Share of sequences that carry the sentence's own embeddings as memory
    /// rows, `dictation_rate` rows per word.
    pub dictation: f64,
    pub dictation_rate: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: TriStage { warmup: 100, hold: 0, decay: 1900, peak: 2e-3, floor_ratio: 0.01 },
            batch_size: 32,
            dictation: 0.5,
            dictation_rate: 4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dictation) {
            return Err(Error::Config(format!("pretrain.dictation={} must lie in [0, 1]", self.dictation)));
        }
        if self.dictation > 0.0 && self.dictation_rate == 0 {
            return Err(Error::Config("pretrain.dictation_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub snr_list: Vec<f64>,
    /// Caps the number of test samples per task (all when `None`).
    pub test_limit: Option<usize>,
    /// Caps the validation samples used for checkpoint comparison.
    pub val_limit: Option<usize>,
}

pub const DEFAULT_SNR_SWEEP: [f64; 7] = [-5.0, -2.5, 0.0, 2.5, 5.0, 7.5, 10.0];

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            temperature: 0.3,
            max_len: 12,
            snr_list: DEFAULT_SNR_SWEEP.to_vec(),
            test_limit: None,
            val_limit: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("eval.beam_width must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("eval.temperature must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("eval.max_len must be positive".into()));
        }
        if self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("eval.snr_list must be finite".into()));
        }
        Ok(())
    }
}

/// One JSON document describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub pretrain: PretrainConfig,
    pub optimizer: AdamWConfig,
    pub stages: Vec<StageConfig>,
    pub dropout: DropoutSchedule,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            encoders: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            pretrain: PretrainConfig::default(),
            optimizer: AdamWConfig::default(),
            stages: vec![StageConfig::stage1(), StageConfig::stage2()],
            dropout: DropoutSchedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoders: self.encoders.clone(), fusion: self.fusion.clone(), decoder: self.decoder.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model().validate()?;
        self.pretrain.validate()?;
        self.dropout.validate().map_err(|e| Error::Config(format!("dropout: {e}")))?;
        for s in &self.stages {
            s.validate(&self.dropout)?;
        }
        self.eval.validate()?;
        // [task; 4L tokens; BOS; L words] must fit
        let need = 1 + 4 * self.corpus.max_words + 1 + self.corpus.max_words;
        if need > self.decoder.max_seq {
            return Err(Error::Config(format!(
                "decoder.max_seq={} is shorter than the longest sequence ({need})",
                self.decoder.max_seq
            )));
        }
        Ok(())
    }

    /// Stage by name: a configured stage if present, else a preset.
    pub fn stage(&self, name: &str) -> Result<StageConfig> {
        if let Some(s) = self.stages.iter().find(|s| s.name == name) {
            return Ok(s.clone());
        }
        let preset = StageConfig::preset(name)?;
        Ok(self.stages.iter().find(|s| s.name == preset.name).cloned().unwrap_or(preset))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        crate::synthcorpus::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
