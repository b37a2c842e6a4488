//! Training loops: language-model pretraining and the multi-task stages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointKind, CheckpointMeta};
use super::config::{NoisePolicy, PretrainConfig, RunConfig, StageConfig};
use super::optim::{AdamW, AdamWConfig};
use super::sampler::sample_task;
use crate::decoder::{teacher_forcing, Segment};
use crate::diffcore::{GradMode, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::fusion::TaskKind;
use crate::model::{Item, Model, TaskSpec, TrainableSet};
use crate::rng;
use crate::synthcorpus::{mix_babble, word_drop_augment, Corpus, Modality, ModalityStream, Sample, BABBLE_SPEAKERS};

/// One row of `curves.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: String,
    pub epoch: f64,
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("stage,epoch,step,task,metric,value\n");
    for p in points {
        out.push_str(&format!("{},{:.4},{},{},{},{:.6}\n", p.stage, p.epoch, p.step, p.task, p.metric, p.value));
    }
    out
}

/// A parameter snapshot with its checkpoint metadata.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub store: ParamStore,
    pub meta: CheckpointMeta,
}

pub struct StageOutcome {
    pub best: Snapshot,
    pub last: Snapshot,
    pub curves: Vec<CurvePoint>,
}

/// Training-time view of one item after augmentation.
struct Prepared {
    streams: Vec<ModalityStream>,
    target: Vec<usize>,
}

fn texts(samples: &[Sample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.words()).collect()
}

/// Positions are offset uniformly at random so every position embedding the
/// fine-tuning layout reaches is trained. A `dictation` share of sequences
/// also carries the sentence's embeddings as memory rows ahead of BOS.
pub fn pretrain_lm(
    store: &mut ParamStore,
    model: &Model,
    corpus: &[Sample],
    cfg: &PretrainConfig,
    opt_cfg: AdamWConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("text corpus is empty".into()));
    }
    Model::set_trainable(store, TrainableSet::DecoderBase);
    let sentences = texts(corpus);
    let max_seq = model.decoder.config().max_seq;
    let mut opt = AdamW::new(store, opt_cfg);
    let mut losses = Vec::with_capacity(cfg.schedule.steps());
    for step in 0..cfg.schedule.steps() {
        let lr = cfg.schedule.lr_at(step)?;
        let mut r = rng::stream(seed, "pretrain", step as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &sentences[r.gen_range(0..sentences.len())];
            let dictated = r.gen_bool(cfg.dictation);
            let (input, target) = teacher_forcing(s);
            let len = input.len() + if dictated { cfg.dictation_rate * s.len() } else { 0 };
            let offset = r.gen_range(0..=max_seq.saturating_sub(len));
            batch.push((s, dictated, input, target, offset));
        }
        let mut grads = {
            let mut g = Graph::new(store, GradMode::Trainable);
            let mut memory = Vec::with_capacity(batch.len());
            for (s, dictated, ..) in &batch {
                memory.push(if *dictated { Some(model.decoder.embed_tokens(&mut g, s, cfg.dictation_rate)?) } else { None });
            }
            let segs: Vec<Segment<'_>> = batch
                .iter()
                .zip(&memory)
                .map(|((_, _, i, _, o), m)| Segment { task: None, memory: *m, tokens: i, offset: *o })
                .collect();
            let targets: Vec<usize> = batch.iter().flat_map(|b| b.3.iter().copied()).collect();
            let packed = model.decoder.forward(&mut g, &segs, false)?;
            let mask = vec![true; targets.len()];
            let loss = g.softmax_cross_entropy(packed.logits, &targets, &mask)?;
            losses.push(g.scalar(loss));
            g.backward(loss)?.params
        };
        opt.step(store, &mut grads, lr)?;
    }
    Ok(losses)
}

/// Held-out perplexity of the base decoder as a language model (positions start at 0).
pub fn lm_perplexity(store: &ParamStore, model: &Model, sentences: &[Vec<usize>]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Argument("no sentences to score".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sentences.chunks(64) {
        let mut g = Graph::new(store, GradMode::None);
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut targets = Vec::new();
        for s in chunk {
            let (i, t) = teacher_forcing(s);
            inputs.push(i);
            targets.extend(t);
        }
        let segs: Vec<Segment<'_>> =
            inputs.iter().map(|i| Segment { task: None, memory: None, tokens: i, offset: 0 }).collect();
        let packed = model.decoder.forward(&mut g, &segs, false)?;
        let mask = vec![true; targets.len()];
        let loss = g.softmax_cross_entropy(packed.logits, &targets, &mask)?;
        total += g.scalar(loss) * targets.len() as f64;
        count += targets.len();
    }
    Ok((total / count as f64).exp())
}

/// Supplies training batches and validation data for the stages.
pub struct TrainContext<'c> {
    pub corpus: &'c Corpus,
    pub cfg: &'c RunConfig,
    pub seed: u64,
}

impl<'c> TrainContext<'c> {
    fn source(&self, task: TaskKind) -> &'c [Sample] {
        if task == TaskKind::Slt {
            &self.corpus.signed.train
        } else {
            &self.corpus.spoken.train
        }
    }

    pub fn val(&self, task: TaskKind) -> &'c [Sample] {
        if task == TaskKind::Slt {
            &self.corpus.signed.val
        } else {
            &self.corpus.spoken.val
        }
    }

    /// Training samples per epoch: the smaller of the two paired training splits.
    pub fn epoch_size(&self) -> usize {
        self.corpus.signed.train.len().min(self.corpus.spoken.train.len()).max(1)
    }
}

pub fn spec_for(stage: &StageConfig, task: TaskKind) -> TaskSpec {
    if task == TaskKind::Slt {
        TaskSpec { task, mask: stage.slt_mask }
    } else {
        task.into()
    }
}

fn add_babble<R: Rng>(
    sample: &Sample,
    pool: &[Sample],
    policy: &NoisePolicy,
    rng: &mut R,
) -> Result<Vec<ModalityStream>> {
    let mut streams = sample.streams.clone();
    if !rng.gen_bool(policy.prob) {
        return Ok(streams);
    }
    let snr = *policy.snr_db.choose(rng).expect("validated non-empty");
    let others: Vec<&Sample> = pool.iter().filter(|s| s.id != sample.id).collect();
    let picked: Vec<&ModalityStream> = others
        .choose_multiple(rng, BABBLE_SPEAKERS)
        .map(|s| s.stream(Modality::Audio).expect("spoken samples carry audio"))
        .collect();
    let audio = streams
        .iter_mut()
        .find(|s| s.modality == Modality::Audio)
        .ok_or_else(|| Error::TaskMismatch("noise policy needs an audio stream".into()))?;
    *audio = mix_babble(audio, &picked, snr)?;
    Ok(streams)
}

fn prepare_batch(ctx: &TrainContext<'_>, stage: &StageConfig, task: TaskKind, step: usize) -> Result<Vec<Prepared>> {
    let pool = ctx.source(task);
    if pool.is_empty() {
        return Err(Error::Argument(format!("{task} needs a training split but it is empty")));
    }
    let mut r = rng::stream(ctx.seed, &format!("batch/{}", stage.name), step as u64);
    let mut out = Vec::with_capacity(stage.batch_size);
    for _ in 0..stage.batch_size {
        let s = &pool[r.gen_range(0..pool.len())];
        let target = if task == TaskKind::Slt && stage.word_drop {
            word_drop_augment(&s.words(), &mut r)
        } else {
            s.words()
        };
        let streams = match (&stage.noise, task) {
            (Some(policy), TaskKind::Asr | TaskKind::Avsr) => add_babble(s, pool, policy, &mut r)?,
            _ => s.streams.clone(),
        };
        out.push(Prepared { streams, target });
    }
    Ok(out)
}

/// One optimizer update on a `task` batch; returns the batch loss.
pub fn train_step(
    store: &mut ParamStore,
    model: &Model,
    opt: &mut AdamW,
    ctx: &TrainContext<'_>,
    stage: &StageConfig,
    task: TaskKind,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let batch = prepare_batch(ctx, stage, task, step)?;
    let spec = spec_for(stage, task);
    let items: Vec<Item<'_>> =
        batch.iter().map(|p| Item { streams: &p.streams, spec, target: &p.target }).collect();
    let (loss, mut grads) = {
        let mut g = Graph::new(store, GradMode::Trainable);
        let loss = model.batch_loss(&mut g, &items)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at {} step {step} ({task})", stage.name)));
        }
        (value, g.backward(loss)?.params)
    };
    opt.step(store, &mut grads, lr)?;
    Ok(loss)
}

/// Teacher-forced next-token accuracy over `samples` (target region incl. EOS).
pub fn next_token_accuracy(store: &ParamStore, model: &Model, samples: &[Sample], spec: TaskSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument(format!("no {} samples to evaluate", spec.task)));
    }
    let texts = texts(samples);
    let (mut hits, mut total) = (0, 0);
    for (chunk, tchunk) in samples.chunks(32).zip(texts.chunks(32)) {
        let items: Vec<Item<'_>> =
            chunk.iter().zip(tchunk).map(|(s, t)| Item { streams: &s.streams, spec, target: t }).collect();
        let (h, n) = model.next_token_hits(store, &items)?;
        hits += h;
        total += n;
    }
    Ok(hits as f64 / total as f64)
}

/// Runs one stage in place on `store` and returns its best and last snapshots.
pub fn run_stage(store: &mut ParamStore, model: &Model, ctx: &TrainContext<'_>, stage: &StageConfig) -> Result<StageOutcome> {
    stage.validate(&ctx.cfg.dropout)?;
    let mix = stage.mix(&ctx.cfg.dropout);
    let tasks = mix.tasks();
    for t in &tasks {
        if ctx.source(*t).is_empty() || ctx.val(*t).is_empty() {
            return Err(Error::Argument(format!("stage {} needs {t} train and val splits", stage.name)));
        }
    }
    Model::set_trainable(store, TrainableSet::FineTune);
    let mut opt = AdamW::new(store, ctx.cfg.optimizer);
    let steps = stage.steps();
    let epoch_size = ctx.epoch_size() as f64;
    let mut curves = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut window: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
    let meta = |step: usize, kind: CheckpointKind, acc: f64| CheckpointMeta {
        model: model.cfg.clone(),
        stage: stage.name.clone(),
        step,
        kind,
        val_accuracy: Some(acc),
    };
    let mut last_acc = 0.0;
    for step in 0..steps {
        let lr = stage.schedule.lr_at(step)?;
        let mut r = rng::stream(ctx.seed, &format!("task/{}", stage.name), step as u64);
        let task = sample_task(&mut r, &mix);
        let loss = train_step(store, model, &mut opt, ctx, stage, task, step, lr)?;
        let w = window.entry(task).or_insert((0.0, 0));
        w.0 += loss;
        w.1 += 1;
        let done = step + 1;
        if done % stage.eval_every == 0 || done == steps {
            let epoch = done as f64 * stage.batch_size as f64 / epoch_size;
            let mut accs = Vec::with_capacity(tasks.len());
            for &t in &tasks {
                let acc = next_token_accuracy(store, model, ctx.val(t), spec_for(stage, t))?;
                accs.push(acc);
                let point = |metric: &str, value: f64| CurvePoint {
                    stage: stage.name.clone(),
                    epoch,
                    step: done,
                    task: t.name().into(),
                    metric: metric.into(),
                    value,
                };
                curves.push(point("next_token_accuracy", acc));
                if let Some((sum, n)) = window.get(&t) {
                    if *n > 0 {
                        curves.push(point("train_loss", sum / *n as f64));
                    }
                }
            }
            window.clear();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            log::info!("{} step {done}/{steps} lr {lr:.2e} val acc {mean:.4}", stage.name);
            last_acc = mean;
            if best.as_ref().map_or(true, |b| mean > b.meta.val_accuracy.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(Snapshot { store: store.clone(), meta: meta(done, CheckpointKind::Best, mean) });
            }
        }
    }
    let last = Snapshot { store: store.clone(), meta: meta(steps, CheckpointKind::Last, last_acc) };
    let best = best.expect("at least one evaluation runs");
    Ok(StageOutcome { best, last, curves })
}

/// Validation metrics used to choose between the best and last checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub speech_wer: BTreeMap<TaskKind, f64>,
    pub slt_bleu4: Option<f64>,
}

impl SelectionMetrics {
    pub fn mean_wer(&self) -> Option<f64> {
        (!self.speech_wer.is_empty()).then(|| self.speech_wer.values().sum::<f64>() / self.speech_wer.len() as f64)
    }
}

/// Lower mean speech WER wins; ties go to higher BLEU-4, then to `last`.
pub fn select_final(best: &SelectionMetrics, last: &SelectionMetrics) -> CheckpointKind {
    if let (Some(b), Some(l)) = (best.mean_wer(), last.mean_wer()) {
        if b < l {
            return CheckpointKind::Best;
        }
        if l < b {
            return CheckpointKind::Last;
        }
    }
    match (best.slt_bleu4, last.slt_bleu4) {
        (Some(b), Some(l)) if b > l => CheckpointKind::Best,
        _ => CheckpointKind::Last,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(wer: &[(TaskKind, f64)], bleu: Option<f64>) -> SelectionMetrics {
        SelectionMetrics { speech_wer: wer.iter().cloned().collect(), slt_bleu4: bleu }
    }

    #[test]
    fn selection_rule() {
        let a = m(&[(TaskKind::Vsr, 0.3), (TaskKind::Asr, 0.1)], Some(0.5));
        assert_eq!(select_final(&a, &a.clone()), CheckpointKind::Last);
        let better = m(&[(TaskKind::Vsr, 0.2), (TaskKind::Asr, 0.1)], Some(0.6));
        assert_eq!(select_final(&better, &a), CheckpointKind::Best);
        let mixed_best = m(&[(TaskKind::Vsr, 0.2), (TaskKind::Asr, 0.1)], Some(0.4));
        assert_eq!(select_final(&mixed_best, &a), CheckpointKind::Best);
        assert_eq!(select_final(&m(&[], Some(0.7)), &m(&[], Some(0.6))), CheckpointKind::Best);
        assert_eq!(select_final(&m(&[], Some(0.6)), &m(&[], Some(0.6))), CheckpointKind::Last);
    }

    #[test]
    fn curves_header() {
        let csv = curves_csv(&[CurvePoint {
            stage: "stage1".into(),
            epoch: 1.0,
            step: 200,
            task: "VSR".into(),
            metric: "next_token_accuracy".into(),
            value: 0.5,
        }]);
        assert_eq!(csv, "stage,epoch,step,task,metric,value\nstage1,1.0000,200,VSR,next_token_accuracy,0.500000\n");
    }
}
