//! Test-set scoring: WER for the speech tasks, BLEU-4 / ROUGE-L for SLT,
//! gloss-pair confusions and the babble SNR sweep.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::BeamConfig;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::fusion::TaskKind;
use crate::metrics::{align, bleu4, rouge_l, wer, AlignOp};
use crate::model::{DecodeRule, Inference, Model, TaskSpec};
use crate::rng;
use crate::synthcorpus::{mix_babble, Lexicon, Modality, Sample, BABBLE_SPEAKERS};
use crate::trainer::{EvalConfig, SelectionMetrics};

pub fn decode_rule(cfg: &EvalConfig, task: TaskKind) -> DecodeRule {
    match task {
        TaskKind::Slt => DecodeRule::Greedy { max_len: cfg.max_len },
        _ => DecodeRule::Beam(BeamConfig { width: cfg.beam_width, temperature: cfg.temperature, max_len: cfg.max_len }),
    }
}

pub fn limit(samples: &[Sample], cap: Option<usize>) -> &[Sample] {
    &samples[..cap.map_or(samples.len(), |c| c.min(samples.len()))]
}

/// Decodes every sample; order of the output follows `samples`.
pub fn decode_all(inf: &Inference<'_>, samples: &[Sample], spec: TaskSpec, rule: DecodeRule) -> Result<Vec<Vec<usize>>> {
    samples.par_iter().map(|s| inf.decode_sample(s, spec, rule)).collect()
}

fn references(samples: &[Sample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.words()).collect()
}

/// Fraction of reference words from a gloss-merged pair that the hypothesis
/// replaces with the pair's other word.
pub fn merged_confusion_rate(lexicon: &Lexicon, refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Length(format!("{} references vs {} hypotheses", refs.len(), hyps.len())));
    }
    let (mut confused, mut total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        total += r.iter().filter(|w| lexicon.gloss_partner(**w).is_some()).count();
        for op in align(r, h) {
            if let AlignOp::Substitute { r: i, h: j } = op {
                if lexicon.gloss_partner(r[i]) == Some(h[j]) {
                    confused += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Argument("no gloss-merged words in the references".into()));
    }
    Ok(confused as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SltScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub merged_confusion: f64,
    pub samples: usize,
}

pub fn score_slt(inf: &Inference<'_>, lexicon: &Lexicon, samples: &[Sample], spec: TaskSpec, cfg: &EvalConfig) -> Result<SltScores> {
    let hyps = decode_all(inf, samples, spec, decode_rule(cfg, TaskKind::Slt))?;
    let refs = references(samples);
    Ok(SltScores {
        bleu4: bleu4(&refs, &hyps)?,
        rouge_l: rouge_l(&refs, &hyps)?,
        merged_confusion: merged_confusion_rate(lexicon, &refs, &hyps)?,
        samples: samples.len(),
    })
}

pub fn score_speech(inf: &Inference<'_>, samples: &[Sample], task: TaskKind, cfg: &EvalConfig) -> Result<f64> {
    let hyps = decode_all(inf, samples, task.into(), decode_rule(cfg, task))?;
    wer(&references(samples), &hyps)
}

/// Babble distractors for test sample `i`: three other samples, fixed per
/// (seed, index) so every SNR and task sees the same mixture.
fn sweep_distractors(samples: &[Sample], i: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "sweep", i as u64);
    let n = samples.len() - 1;
    sample_indices(&mut r, n, BABBLE_SPEAKERS.min(n)).into_iter().map(|j| if j >= i { j + 1 } else { j }).collect()
}

pub fn with_babble(samples: &[Sample], snr_db: f64, seed: u64) -> Result<Vec<Sample>> {
    if samples.len() < 2 {
        return Err(Error::Argument("babble needs at least two test samples".into()));
    }
    (0..samples.len())
        .map(|i| {
            let picks = sweep_distractors(samples, i, seed);
            let distractors: Vec<_> = picks
                .iter()
                .map(|&j| samples[j].stream(Modality::Audio).ok_or_else(|| Error::Modality("distractor has no audio".into())))
                .collect::<Result<_>>()?;
            let mut s = samples[i].clone();
            let audio = s.stream_mut(Modality::Audio).ok_or_else(|| Error::Modality("sample has no audio".into()))?;
            *audio = mix_babble(audio, &distractors, snr_db)?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: TaskKind,
    pub snr_db: f64,
    pub wer: f64,
}

/// WER of every speech task under babble at each SNR. VSR never reads the
/// audio, so it is decoded once and repeated.
pub fn snr_sweep(inf: &Inference<'_>, samples: &[Sample], snrs: &[f64], seed: u64, cfg: &EvalConfig) -> Result<Vec<SweepRow>> {
    let vsr = score_speech(inf, samples, TaskKind::Vsr, cfg)?;
    let mut rows = Vec::with_capacity(snrs.len() * 3);
    for &snr in snrs {
        let noisy = with_babble(samples, snr, seed)?;
        rows.push(SweepRow { task: TaskKind::Vsr, snr_db: snr, wer: vsr });
        for task in [TaskKind::Asr, TaskKind::Avsr] {
            rows.push(SweepRow { task, snr_db: snr, wer: score_speech(inf, &noisy, task, cfg)? });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("task,snr_db,wer\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.task.name(), r.snr_db, r.wer));
    }
    out
}

/// Final test metrics for one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub wer: BTreeMap<TaskKind, f64>,
    pub slt: Option<SltScores>,
}

/// Scores `tasks` on the test splits (capped by `cfg.test_limit`).
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    lexicon: &Lexicon,
    signed: &[Sample],
    spoken: &[Sample],
    tasks: &[TaskKind],
    slt_spec: TaskSpec,
    cfg: &EvalConfig,
) -> Result<TestMetrics> {
    let inf = Inference::new(model, store)?;
    let mut out = TestMetrics::default();
    for &task in tasks {
        if task == TaskKind::Slt {
            out.slt = Some(score_slt(&inf, lexicon, limit(signed, cfg.test_limit), slt_spec, cfg)?);
        } else {
            out.wer.insert(task, score_speech(&inf, limit(spoken, cfg.test_limit), task, cfg)?);
        }
    }
    Ok(out)
}

/// Validation metrics for choosing between the best and last checkpoints.
pub fn selection_metrics(
    model: &Model,
    store: &ParamStore,
    lexicon: &Lexicon,
    signed_val: &[Sample],
    spoken_val: &[Sample],
    tasks: &[TaskKind],
    slt_spec: TaskSpec,
    cfg: &EvalConfig,
) -> Result<SelectionMetrics> {
    let capped = EvalConfig { test_limit: cfg.val_limit, ..cfg.clone() };
    let m = evaluate(model, store, lexicon, signed_val, spoken_val, tasks, slt_spec, &capped)?;
    Ok(SelectionMetrics { speech_wer: m.wer, slt_bleu4: m.slt.map(|s| s.bleu4) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{Corpus, CorpusConfig, SplitSizes};

    fn tiny() -> Corpus {
        let sizes = SplitSizes { train: 4, val: 4, test: 6 };
        Corpus::generate(3, &CorpusConfig { signed: sizes, spoken: sizes, text_only: 4, ..CorpusConfig::default() })
            .unwrap()
    }

    #[test]
    fn confusion_counts_partner_substitutions_only() {
        let lex = tiny().lexicon;
        let (a, b) = lex.merged_pairs()[0];
        let plain = (0..40).find(|w| lex.gloss_partner(*w).is_none()).unwrap();
        let refs = vec![vec![a, plain, b], vec![a]];
        let hyps = vec![vec![b, plain, plain], vec![a]];
        // three merged words, one swapped for its partner
        assert!((merged_confusion_rate(&lex, &refs, &hyps).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(merged_confusion_rate(&lex, &[vec![plain]], &[vec![plain]]).is_err());
    }

    #[test]
    fn sweep_distractors_exclude_self_and_repeat() {
        let c = tiny();
        for i in 0..c.spoken.test.len() {
            let d = sweep_distractors(&c.spoken.test, i, 9);
            assert_eq!(d.len(), BABBLE_SPEAKERS);
            assert!(!d.contains(&i));
            assert_eq!(d, sweep_distractors(&c.spoken.test, i, 9));
        }
        let a = with_babble(&c.spoken.test, 0.0, 9).unwrap();
        let b = with_babble(&c.spoken.test, 0.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].stream(Modality::Lip), c.spoken.test[0].stream(Modality::Lip));
        assert_ne!(a[0].stream(Modality::Audio), c.spoken.test[0].stream(Modality::Audio));
    }
}
