//! Full pipeline: encoders → length adapters → masked fusion → mapping → decoder.

use serde::{Deserialize, Serialize};

use crate::decoder::{
    beam, greedy, is_base_param, output_tokens, BeamConfig, Decoder, DecoderConfig, Hypothesis, InferenceDecoder, EOS,
};
use crate::diffcore::{GradMode, Graph, ParamStore, Tensor2, Var};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    concat_dims, fuse, AlignedFeatures, FusionConfig, LengthAdapter, LinguisticTokens, MappingNetwork, ModalityMask,
    TaskKind,
};
use crate::rng;
use crate::synthcorpus::{Modality, ModalityStream, Sample};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoders.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.fusion.d_llm != self.decoder.d_model {
            return Err(Error::Config(format!(
                "fusion.d_llm={} must equal decoder.d_model={}",
                self.fusion.d_llm, self.decoder.d_model
            )));
        }
        Ok(())
    }
}

/// What the decoder is asked to do with a sample: the task token plus the
/// modality blocks that survive masking (normally `task.mask()`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub mask: ModalityMask,
}

impl From<TaskKind> for TaskSpec {
    fn from(task: TaskKind) -> Self {
        TaskSpec { task, mask: task.mask() }
    }
}

/// Which parameter group receives updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    /// Base decoder only (language-model pretraining).
    DecoderBase,
    /// Everything except the frozen base decoder.
    FineTune,
}

impl TrainableSet {
    pub fn contains(self, name: &str) -> bool {
        match self {
            TrainableSet::DecoderBase => is_base_param(name),
            TrainableSet::FineTune => !is_base_param(name),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoders: [Encoder; 3],
    pub adapters: [LengthAdapter; 3],
    pub mapping: MappingNetwork,
    pub decoder: Decoder,
}

/// One training or evaluation item.
#[derive(Clone, Copy, Debug)]
pub struct Item<'a> {
    pub streams: &'a [ModalityStream],
    pub spec: TaskSpec,
    pub target: &'a [usize],
}

fn find(streams: &[ModalityStream], m: Modality) -> Option<&ModalityStream> {
    streams.iter().find(|s| s.modality == m)
}

impl Model {
    /// Registers freshly initialized parameters drawn from `seed`.
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let encoders = Modality::ALL.map(|m| Encoder::register(store, m, &cfg.encoders, &mut r));
        let adapters = Modality::ALL.map(|m| {
            LengthAdapter::register(store, m, cfg.encoders.out_dims(m), cfg.fusion.stride(m), &mut r)
        });
        let d_in = concat_dims(&cfg.encoders);
        let mapping =
            MappingNetwork::register(store, d_in, cfg.fusion.hidden_dims(&cfg.encoders), cfg.fusion.d_llm, &mut r);
        let decoder = Decoder::register(store, &cfg.decoder, &mut r)?;
        Ok(Model { cfg: cfg.clone(), encoders, adapters, mapping, decoder })
    }

    pub fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(3);
        let mut ad = Vec::with_capacity(3);
        for m in Modality::ALL {
            enc.push(Encoder::bind(store, m, &cfg.encoders)?);
            ad.push(LengthAdapter::bind(store, m, cfg.fusion.stride(m))?);
        }
        Ok(Model {
            cfg: cfg.clone(),
            encoders: enc.try_into().expect("three encoders"),
            adapters: ad.try_into().expect("three adapters"),
            mapping: MappingNetwork::bind(store, concat_dims(&cfg.encoders))?,
            decoder: Decoder::bind(store, &cfg.decoder)?,
        })
    }

    pub fn set_trainable(store: &mut ParamStore, set: TrainableSet) {
        store.set_trainable_by(|n| set.contains(n));
    }

    fn index(m: Modality) -> usize {
        match m {
            Modality::Sign => 0,
            Modality::Lip => 1,
            Modality::Audio => 2,
        }
    }

    /// Adapter outputs for the modalities `mask` keeps; masked streams are never read.
    pub fn aligned(&self, g: &mut Graph<'_>, streams: &[ModalityStream], mask: ModalityMask) -> Result<AlignedFeatures> {
        let mut aligned = AlignedFeatures::default();
        for m in mask.kept() {
            let s = find(streams, m).ok_or_else(|| {
                Error::TaskMismatch(format!("task needs a {} stream but the sample has none", m.name()))
            })?;
            let i = Self::index(m);
            let f = self.encoders[i].encode(g, s)?;
            let a = self.adapters[i].adapt(g, &f)?;
            aligned.set(m, a);
        }
        aligned.trim_to_common(g)?;
        Ok(aligned)
    }

    /// `U` for the given streams and task.
    pub fn tokens(&self, g: &mut Graph<'_>, streams: &[ModalityStream], spec: TaskSpec) -> Result<Var> {
        let aligned = self.aligned(g, streams, spec.mask)?;
        let fused = fuse(g, &aligned, spec.mask, &self.cfg.encoders)?;
        self.mapping.map_tokens(g, fused)
    }

    pub fn linguistic_tokens(&self, store: &ParamStore, streams: &[ModalityStream], spec: TaskSpec) -> Result<LinguisticTokens> {
        let mut g = Graph::new(store, GradMode::None);
        let u = self.tokens(&mut g, streams, spec)?;
        Ok(LinguisticTokens { values: g.value(u).clone(), task: spec.task })
    }

    /// Mean next-token cross-entropy over a packed batch.
    pub fn batch_loss(&self, g: &mut Graph<'_>, items: &[Item<'_>]) -> Result<Var> {
        let mut mem = Vec::with_capacity(items.len());
        for it in items {
            mem.push(self.tokens(g, it.streams, it.spec)?);
        }
        let batch: Vec<(Option<TaskKind>, Option<Var>, &[usize])> =
            items.iter().zip(&mem).map(|(it, u)| (Some(it.spec.task), Some(*u), it.target)).collect();
        self.decoder.sequence_loss(g, &batch, true)
    }

    /// Teacher-forced argmax hits and positions over a batch (target region incl. EOS).
    pub fn next_token_hits(&self, store: &ParamStore, items: &[Item<'_>]) -> Result<(usize, usize)> {
        let mut g = Graph::new(store, GradMode::None);
        let mut mem = Vec::with_capacity(items.len());
        let mut inputs = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        for it in items {
            mem.push(self.tokens(&mut g, it.streams, it.spec)?);
            let (i, t) = crate::decoder::teacher_forcing(it.target);
            inputs.push(i);
            targets.extend(t);
        }
        let segs: Vec<crate::decoder::Segment<'_>> = items
            .iter()
            .zip(&mem)
            .zip(&inputs)
            .map(|((it, u), inp)| crate::decoder::Segment { task: Some(it.spec.task), memory: Some(*u), tokens: inp, offset: 0 })
            .collect();
        let packed = self.decoder.forward(&mut g, &segs, true)?;
        let logits = g.value(packed.logits);
        let mut hits = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = logits.row(r);
            let all: Vec<usize> = (0..row.len()).collect();
            if crate::decoder::argmax(row, &all) == *t {
                hits += 1;
            }
        }
        Ok((hits, targets.len()))
    }
}

/// Frozen snapshot used for decoding.
pub struct Inference<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub decoder: InferenceDecoder,
    allowed: Vec<usize>,
}

/// Decoding rule per task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeRule {
    Greedy { max_len: usize },
    Beam(BeamConfig),
}

impl DecodeRule {
    /// Greedy for SLT, width-5 temperature-0.3 beam for the speech tasks.
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Slt => DecodeRule::Greedy { max_len: 12 },
            _ => DecodeRule::Beam(BeamConfig::default()),
        }
    }
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore) -> Result<Self> {
        Ok(Inference { model, store, decoder: InferenceDecoder::new(store, &model.decoder, true)?, allowed: output_tokens() })
    }

    pub fn start(&self, u: &Tensor2, task: TaskKind) -> Result<(crate::decoder::KvCache, Vec<f64>)> {
        self.decoder.start(Some(task), Some(u))
    }

    pub fn decode_tokens(&self, u: &LinguisticTokens, rule: DecodeRule) -> Result<Hypothesis> {
        let (cache, logits) = self.start(&u.values, u.task)?;
        match rule {
            DecodeRule::Greedy { max_len } => greedy(&self.decoder, cache, logits, &self.allowed, Some(EOS), max_len),
            DecodeRule::Beam(cfg) => beam(&self.decoder, cache, logits, &self.allowed, Some(EOS), &cfg),
        }
    }

    pub fn decode(&self, streams: &[ModalityStream], spec: TaskSpec, rule: DecodeRule) -> Result<Hypothesis> {
        let u = self.model.linguistic_tokens(self.store, streams, spec)?;
        self.decode_tokens(&u, rule)
    }

    pub fn decode_sample(&self, sample: &Sample, spec: TaskSpec, rule: DecodeRule) -> Result<Vec<usize>> {
        Ok(self.decode(&sample.streams, spec, rule)?.tokens)
    }
}
