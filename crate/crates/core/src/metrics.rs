//! Word error rate, corpus BLEU-4 and ROUGE-L.
//!
//! All functions are generic over the token type so they apply equally to
//! word strings and vocabulary indices.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub samples: usize,
}

/// One step of a minimum-edit alignment between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Insert { h: usize },
    Delete { r: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum edit alignment; ties prefer match/substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.push(if same {
                    AlignOp::Match { r: i - 1, h: j - 1 }
                } else {
                    AlignOp::Substitute { r: i - 1, h: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(AlignOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(AlignOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let mut c = EditCounts::default();
    for op in align(reference, hypothesis) {
        match op {
            AlignOp::Match { .. } => {}
            AlignOp::Substitute { .. } => c.substitutions += 1,
            AlignOp::Insert { .. } => c.insertions += 1,
            AlignOp::Delete { .. } => c.deletions += 1,
        }
    }
    c
}

fn check_pairs<T>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::Argument("metric over an empty corpus".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::Argument(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::Argument(format!("reference {i} is empty")));
    }
    Ok(())
}

/// Corpus-pooled word error rate: total edits over total reference words.
pub fn wer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let mut errors = 0usize;
    let mut words = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        errors += edit_counts(r, h).total();
        words += r.len();
    }
    Ok(errors as f64 / words as f64)
}

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with clipped n-gram precisions, uniform weights and brevity penalty.
/// No smoothing: any zero pooled precision gives 0.
pub fn bleu4<T: Hash + Eq + Clone>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Argument(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        log::warn!("BLEU over an empty hypothesis corpus is 0");
        return Ok(0.0);
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (r, h) in refs.iter().zip(hyps) {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / 4.0).exp())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-sentence ROUGE-L F1 (β = 1).
pub fn rouge_l<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    check_pairs(refs, hyps)?;
    let total: f64 = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            if h.is_empty() {
                return 0.0;
            }
            let l = lcs_len(r, h) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / h.len() as f64;
            let rc = l / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(total / refs.len() as f64)
}
