//! Pre-LN causal transformer over packed sequences, with low-rank adapters on
//! the attention projections.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS, VOCAB_SIZE};
use crate::diffcore::{affine, Graph, ParamId, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};
use crate::fusion::TaskKind;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_model: 64, layers: 3, heads: 4, ffn: 256, max_seq: 160, lora_rank: 4, lora_alpha: 8.0 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(Error::Config("decoder widths and depth must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.d_model={} is not divisible by decoder.heads={}",
                self.d_model, self.heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return Err(Error::Config(format!(
                "decoder.lora_rank={} must lie in 1..={}",
                self.lora_rank, self.d_model
            )));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("decoder.lora_alpha must be positive".into()));
        }
        if self.max_seq < 2 {
            return Err(Error::Config("decoder.max_seq must be at least 2".into()));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Proj {
    pub w: ParamId,
    pub b: ParamId,
    pub lora_a: ParamId,
    pub lora_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layer {
    pub ln1: (ParamId, ParamId),
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub o: Proj,
    pub ln2: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
    pub down: (ParamId, ParamId),
}

/// Parameter handles for the decoder; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Decoder {
    pub(crate) cfg: DecoderConfig,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) task_emb: ParamId,
    pub(crate) layers: Vec<Layer>,
    pub(crate) ln_f: (ParamId, ParamId),
    pub(crate) head: (ParamId, ParamId),
}

/// One sequence of a packed batch: `[task] ++ memory rows ++ tokens`.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'s> {
    pub task: Option<TaskKind>,
    pub memory: Option<Var>,
    /// Text region, starting with BOS.
    pub tokens: &'s [usize],
    /// Position index of the segment's first row.
    pub offset: usize,
}

/// Logits for the text regions of a packed batch, stacked in segment order.
#[derive(Clone, Debug)]
pub struct PackedLogits {
    pub logits: Var,
    pub rows: Vec<Range<usize>>,
}

/// Names of the parameters that stay frozen after language-model pretraining.
pub fn is_base_param(name: &str) -> bool {
    name.starts_with("dec.") && !name.contains(".lora_") && name != "dec.task_emb"
}

/// `[BOS, w…]` inputs and `[w…, EOS]` targets.
pub fn teacher_forcing(text: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(text.len() + 1);
    input.push(BOS);
    input.extend_from_slice(text);
    let mut target = text.to_vec();
    target.push(EOS);
    (input, target)
}

fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor2 {
    Tensor2::randn(rows, cols, std, rng)
}

impl Decoder {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let r = cfg.lora_rank;
        let w_std = 1.0 / (d as f64).sqrt();
        let out_std = w_std / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = store.insert("dec.tok_emb", randn(rng, VOCAB_SIZE, d, 0.1), true);
        let pos_emb = store.insert("dec.pos_emb", randn(rng, cfg.max_seq, d, 0.1), true);
        let task_emb = store.insert("dec.task_emb", randn(rng, TaskKind::ALL.len(), d, 0.1), true);
        let ln = |store: &mut ParamStore, name: &str| {
            (
                store.insert(format!("{name}.g"), Tensor2::filled(1, d, 1.0), true),
                store.insert(format!("{name}.b"), Tensor2::zeros(1, d), true),
            )
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("dec.l{l}");
            let ln1 = ln(store, &format!("{p}.ln1"));
            let mut proj = |store: &mut ParamStore, which: &str, std: f64| Proj {
                w: store.insert(format!("{p}.attn.{which}.w"), randn(rng, d, d, std), true),
                b: store.insert(format!("{p}.attn.{which}.b"), Tensor2::zeros(1, d), true),
                lora_a: store.insert(format!("{p}.attn.{which}.lora_a"), randn(rng, d, r, w_std), true),
                lora_b: store.insert(format!("{p}.attn.{which}.lora_b"), Tensor2::zeros(r, d), true),
            };
            let q = proj(store, "q", w_std);
            let k = proj(store, "k", w_std);
            let v = proj(store, "v", w_std);
            let o = proj(store, "o", out_std);
            let ln2 = ln(store, &format!("{p}.ln2"));
            let up = (
                store.insert(format!("{p}.ffn.up.w"), randn(rng, d, cfg.ffn, w_std), true),
                store.insert(format!("{p}.ffn.up.b"), Tensor2::zeros(1, cfg.ffn), true),
            );
            let down_std = 1.0 / (cfg.ffn as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt();
            let down = (
                store.insert(format!("{p}.ffn.down.w"), randn(rng, cfg.ffn, d, down_std), true),
                store.insert(format!("{p}.ffn.down.b"), Tensor2::zeros(1, d), true),
            );
            layers.push(Layer { ln1, q, k, v, o, ln2, up, down });
        }
        let ln_f = ln(store, "dec.ln_f");
        // small head: the untrained model starts near the uniform distribution
        let head = (
            store.insert("dec.head.w", randn(rng, d, VOCAB_SIZE, 0.1 * w_std), true),
            store.insert("dec.head.b", Tensor2::zeros(1, VOCAB_SIZE), true),
        );
        Ok(Decoder { cfg: cfg.clone(), tok_emb, pos_emb, task_emb, layers, ln_f, head })
    }

    pub fn bind(store: &ParamStore, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let id = |n: &str| store.expect_id(n);
        let pair = |n: &str, a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((id(&format!("{n}.{a}"))?, id(&format!("{n}.{b}"))?))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("dec.l{l}");
            let proj = |which: &str| -> Result<Proj> {
                let n = format!("{p}.attn.{which}");
                Ok(Proj {
                    w: id(&format!("{n}.w"))?,
                    b: id(&format!("{n}.b"))?,
                    lora_a: id(&format!("{n}.lora_a"))?,
                    lora_b: id(&format!("{n}.lora_b"))?,
                })
            };
            layers.push(Layer {
                ln1: pair(&format!("{p}.ln1"), "g", "b")?,
                q: proj("q")?,
                k: proj("k")?,
                v: proj("v")?,
                o: proj("o")?,
                ln2: pair(&format!("{p}.ln2"), "g", "b")?,
                up: pair(&format!("{p}.ffn.up"), "w", "b")?,
                down: pair(&format!("{p}.ffn.down"), "w", "b")?,
            });
        }
        let dec = Decoder {
            cfg: cfg.clone(),
            tok_emb: id("dec.tok_emb")?,
            pos_emb: id("dec.pos_emb")?,
            task_emb: id("dec.task_emb")?,
            layers,
            ln_f: pair("dec.ln_f", "g", "b")?,
            head: pair("dec.head", "w", "b")?,
        };
        if store.value(dec.pos_emb).rows() != cfg.max_seq || store.value(dec.tok_emb).cols() != cfg.d_model {
            return Err(Error::Config("decoder parameters do not match decoder config".into()));
        }
        Ok(dec)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn projection(&self, g: &mut Graph<'_>, x: Var, p: &Proj, lora: bool) -> Result<Var> {
        let (w, b) = (g.param(p.w), g.param(p.b));
        let y = affine(g, x, w, b)?;
        if !lora {
            return Ok(y);
        }
        let (a, bb) = (g.param(p.lora_a), g.param(p.lora_b));
        let xa = g.matmul(x, a)?;
        let delta = g.matmul(xa, bb)?;
        let delta = g.scale(delta, self.cfg.lora_scale());
        g.add(y, delta)
    }

    /// Runs the packed batch and returns logits for every text-region row.
    /// Token embeddings as memory rows, each token repeated `rate` times.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, tokens: &[usize], rate: usize) -> Result<Var> {
        if let Some(t) = tokens.iter().find(|t| **t >= VOCAB_SIZE) {
            return Err(Error::Argument(format!("token {t} outside vocabulary")));
        }
        let tok = g.param(self.tok_emb);
        g.gather(tokens.iter().flat_map(|t| std::iter::repeat((tok, *t)).take(rate)).collect())
    }

    pub fn forward(&self, g: &mut Graph<'_>, segments: &[Segment<'_>], lora: bool) -> Result<PackedLogits> {
        if segments.is_empty() {
            return Err(Error::Argument("empty decoder batch".into()));
        }
        let d = self.cfg.d_model;
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let mut emb = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(segments.len());
        let mut text_rows = Vec::new();
        let mut rows = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.tokens.is_empty() {
                return Err(Error::Argument("segment has no text region".into()));
            }
            let start = emb.len();
            if let Some(task) = seg.task {
                let t = g.param(self.task_emb);
                emb.push((t, task.index()));
            }
            if let Some(m) = seg.memory {
                let (n, c) = g.shape(m);
                if c != d {
                    return Err(Error::Dimension(format!("memory rows have {c} channels, decoder expects {d}")));
                }
                emb.extend((0..n).map(|i| (m, i)));
            }
            let text_start = emb.len();
            for &t in seg.tokens {
                if t >= VOCAB_SIZE {
                    return Err(Error::Argument(format!("token {t} outside vocabulary")));
                }
                emb.push((tok, t));
            }
            let len = emb.len() - start;
            if seg.offset + len > self.cfg.max_seq {
                return Err(Error::Length(format!(
                    "sequence of {len} positions at offset {} exceeds max_seq {}",
                    seg.offset, self.cfg.max_seq
                )));
            }
            positions.extend((0..len).map(|i| (pos, seg.offset + i)));
            let first = text_rows.len();
            text_rows.extend(text_start..start + len);
            rows.push(first..text_rows.len());
            lens.push(len);
        }
        let e = g.gather(emb)?;
        let p = g.gather(positions)?;
        let mut x = g.add(e, p)?;
        for layer in &self.layers {
            let (g1, b1) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let q = self.projection(g, h, &layer.q, lora)?;
            let k = self.projection(g, h, &layer.k, lora)?;
            let v = self.projection(g, h, &layer.v, lora)?;
            let ctx = g.causal_attention(q, k, v, self.cfg.heads, &lens)?;
            let a = self.projection(g, ctx, &layer.o, lora)?;
            x = g.add(x, a)?;
            let (g2, b2) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (uw, ub) = (g.param(layer.up.0), g.param(layer.up.1));
            let u = affine(g, h, uw, ub)?;
            let u = g.gelu(u);
            let (dw, db) = (g.param(layer.down.0), g.param(layer.down.1));
            let f = affine(g, u, dw, db)?;
            x = g.add(x, f)?;
        }
        let text = g.gather(text_rows.into_iter().map(|r| (x, r)).collect())?;
        let (gf, bf) = (g.param(self.ln_f.0), g.param(self.ln_f.1));
        let h = g.layer_norm(text, gf, bf, LN_EPS)?;
        let (hw, hb) = (g.param(self.head.0), g.param(self.head.1));
        let logits = affine(g, h, hw, hb)?;
        Ok(PackedLogits { logits, rows })
    }

    /// Logits for `[task; U; BOS ++ prefix]`: one row per text position.
    pub fn forward_logits(
        &self,
        g: &mut Graph<'_>,
        task: TaskKind,
        tokens: Var,
        prefix: &[usize],
        lora: bool,
    ) -> Result<Var> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let seg = Segment { task: Some(task), memory: Some(tokens), tokens: &input, offset: 0 };
        Ok(self.forward(g, &[seg], lora)?.logits)
    }

    /// Mean next-token cross-entropy over the target regions of `(memory, task, text)` items.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<'_>,
        items: &[(Option<TaskKind>, Option<Var>, &[usize])],
        lora: bool,
    ) -> Result<Var> {
        let mut inputs = Vec::with_capacity(items.len());
        let mut targets = Vec::new();
        for (_, _, text) in items {
            if text.is_empty() {
                return Err(Error::Argument("empty target text".into()));
            }
            let (i, t) = teacher_forcing(text);
            inputs.push(i);
            targets.extend(t);
        }
        let segs: Vec<Segment<'_>> = items
            .iter()
            .zip(&inputs)
            .map(|((task, mem, _), inp)| Segment { task: *task, memory: *mem, tokens: inp, offset: 0 })
            .collect();
        let packed = self.forward(g, &segs, lora)?;
        let mask = vec![true; targets.len()];
        g.softmax_cross_entropy(packed.logits, &targets, &mask)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::GradMode;

    fn small() -> DecoderConfig {
        DecoderConfig { d_model: 8, layers: 2, heads: 2, ffn: 16, max_seq: 24, lora_rank: 2, lora_alpha: 4.0 }
    }

    fn build(cfg: &DecoderConfig) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let dec = Decoder::register(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, dec)
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        assert_eq!(DecoderConfig::default().lora_scale(), 2.0);
        let bad = DecoderConfig { heads: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DecoderConfig { lora_rank: 65, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn bos_only_prefix_yields_one_row() {
        let cfg = small();
        let (store, dec) = build(&cfg);
        let mut g = Graph::new(&store, GradMode::None);
        let u = g.input(Tensor2::randn(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let l = dec.forward_logits(&mut g, TaskKind::Asr, u, &[], true).unwrap();
        assert_eq!(g.shape(l), (1, VOCAB_SIZE));
        let l = dec.forward_logits(&mut g, TaskKind::Asr, u, &[3, 4], true).unwrap();
        assert_eq!(g.shape(l), (3, VOCAB_SIZE));
    }

    #[test]
    fn appending_tokens_keeps_earlier_rows() {
        let cfg = small();
        let (store, dec) = build(&cfg);
        let mut g = Graph::new(&store, GradMode::None);
        let u = g.input(Tensor2::randn(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let a = dec.forward_logits(&mut g, TaskKind::Slt, u, &[1, 2], true).unwrap();
        let b = dec.forward_logits(&mut g, TaskKind::Slt, u, &[1, 2, 7, 9], true).unwrap();
        let (a, b) = (g.value(a).clone(), g.value(b).clone());
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn packing_matches_separate_runs() {
        let cfg = small();
        let (store, dec) = build(&cfg);
        let mut g = Graph::new(&store, GradMode::None);
        let u1 = g.input(Tensor2::randn(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let u2 = g.input(Tensor2::randn(6, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let t1 = [BOS, 1, 2];
        let t2 = [BOS, 5];
        let segs = [
            Segment { task: Some(TaskKind::Vsr), memory: Some(u1), tokens: &t1, offset: 0 },
            Segment { task: Some(TaskKind::Asr), memory: Some(u2), tokens: &t2, offset: 0 },
        ];
        let packed = dec.forward(&mut g, &segs, true).unwrap();
        let joint = g.value(packed.logits).clone();
        assert_eq!(packed.rows, vec![0..3, 3..5]);
        let solo = dec.forward(&mut g, &segs[1..], true).unwrap();
        let solo = g.value(solo.logits).clone();
        assert!(joint.slice_rows(3, 2).max_abs_diff(&solo) < 1e-12);
    }

    #[test]
    fn zero_lora_matches_base_exactly() {
        let cfg = small();
        let (store, dec) = build(&cfg);
        let mut g = Graph::new(&store, GradMode::None);
        let u = g.input(Tensor2::randn(4, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let a = dec.forward_logits(&mut g, TaskKind::Avsr, u, &[1, 2, 3], true).unwrap();
        let b = dec.forward_logits(&mut g, TaskKind::Avsr, u, &[1, 2, 3], false).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn overflow_and_bad_tokens() {
        let cfg = small();
        let (store, dec) = build(&cfg);
        let mut g = Graph::new(&store, GradMode::None);
        let u = g.input(Tensor2::zeros(20, 8));
        let long = vec![1; 4];
        assert!(matches!(dec.forward_logits(&mut g, TaskKind::Asr, u, &long, true), Err(Error::Length(_))));
        let u = g.input(Tensor2::zeros(2, 8));
        assert!(dec.forward_logits(&mut g, TaskKind::Asr, u, &[VOCAB_SIZE], true).is_err());
        let u = g.input(Tensor2::zeros(2, 7));
        assert!(matches!(dec.forward_logits(&mut g, TaskKind::Asr, u, &[1], true), Err(Error::Dimension(_))));
    }

    #[test]
    fn base_param_partition() {
        let (store, _) = build(&small());
        let base: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).filter(|n| is_base_param(n)).collect();
        assert!(base.contains(&"dec.l0.attn.q.w"));
        assert!(!base.contains(&"dec.l0.attn.q.lora_a"));
        assert!(!base.contains(&"dec.task_emb"));
    }
}
