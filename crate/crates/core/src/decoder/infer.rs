//! Inference path: LoRA merged into the base weights (`W_eff = W + (α/r)·A·B`)
//! and per-layer key/value caches so each generated token costs one row.

use super::search::StepModel;
use super::transformer::{Decoder, LN_EPS};
use super::vocab::{BOS, VOCAB_SIZE};
use crate::diffcore::{gelu, ParamId, ParamStore, Tensor2};
use crate::error::{Error, Result};
use crate::fusion::TaskKind;

struct Affine {
    w: Tensor2,
    b: Vec<f64>,
}

impl Affine {
    fn new(store: &ParamStore, w: ParamId, b: ParamId) -> Self {
        Affine { w: store.value(w).clone(), b: store.value(b).data().to_vec() }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.w.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

struct Norm {
    g: Vec<f64>,
    b: Vec<f64>,
}

impl Norm {
    fn new(store: &ParamStore, ids: (ParamId, ParamId)) -> Self {
        Norm { g: store.value(ids.0).data().to_vec(), b: store.value(ids.1).data().to_vec() }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter().zip(&self.g).zip(&self.b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
    }
}

struct MergedLayer {
    ln1: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: Norm,
    up: Affine,
    down: Affine,
}

/// Frozen decoder snapshot for fast token-by-token generation.
pub struct InferenceDecoder {
    d: usize,
    heads: usize,
    max_seq: usize,
    tok_emb: Tensor2,
    pos_emb: Tensor2,
    task_emb: Tensor2,
    layers: Vec<MergedLayer>,
    ln_f: Norm,
    head: Affine,
}

/// Key/value cache for one sequence.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn merge(store: &ParamStore, p: &super::transformer::Proj, scale: Option<f64>) -> Result<Affine> {
    let mut a = Affine::new(store, p.w, p.b);
    if let Some(s) = scale {
        let delta = store.value(p.lora_a).matmul(store.value(p.lora_b))?;
        a.w.axpy(s, &delta);
    }
    Ok(a)
}

impl InferenceDecoder {
    /// Snapshots `dec`'s weights; `lora` folds the adapters into the projections.
    pub fn new(store: &ParamStore, dec: &Decoder, lora: bool) -> Result<Self> {
        let scale = lora.then(|| dec.cfg.lora_scale());
        let mut layers = Vec::with_capacity(dec.layers.len());
        for l in &dec.layers {
            layers.push(MergedLayer {
                ln1: Norm::new(store, l.ln1),
                q: merge(store, &l.q, scale)?,
                k: merge(store, &l.k, scale)?,
                v: merge(store, &l.v, scale)?,
                o: merge(store, &l.o, scale)?,
                ln2: Norm::new(store, l.ln2),
                up: Affine::new(store, l.up.0, l.up.1),
                down: Affine::new(store, l.down.0, l.down.1),
            });
        }
        Ok(InferenceDecoder {
            d: dec.cfg.d_model,
            heads: dec.cfg.heads,
            max_seq: dec.cfg.max_seq,
            tok_emb: store.value(dec.tok_emb).clone(),
            pos_emb: store.value(dec.pos_emb).clone(),
            task_emb: store.value(dec.task_emb).clone(),
            layers,
            ln_f: Norm::new(store, dec.ln_f),
            head: Affine::new(store, dec.head.0, dec.head.1),
        })
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache { keys: vec![Vec::new(); self.layers.len()], values: vec![Vec::new(); self.layers.len()], len: 0 }
    }

    /// Appends one embedding row and returns the logits at that position.
    pub fn push_row(&self, cache: &mut KvCache, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.d {
            return Err(Error::Dimension(format!("row has {} channels, decoder expects {}", row.len(), self.d)));
        }
        let pos = cache.len;
        if pos >= self.max_seq {
            return Err(Error::Length(format!("sequence exceeds max_seq {}", self.max_seq)));
        }
        let mut x: Vec<f64> = row.iter().zip(self.pos_emb.row(pos)).map(|(a, b)| a + b).collect();
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.ln1.apply(&x);
            let q = layer.q.apply(&h);
            cache.keys[li].extend(layer.k.apply(&h));
            cache.values[li].extend(layer.v.apply(&h));
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            let mut ctx = vec![0.0; self.d];
            let mut scores = vec![0.0; pos + 1];
            for hd in 0..self.heads {
                let c0 = hd * dh;
                let qh = &q[c0..c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * self.d + c0..j * self.d + c0 + dh];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut ctx[c0..c0 + dh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &values[j * self.d + c0..j * self.d + c0 + dh];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
            }
            let a = layer.o.apply(&ctx);
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += ai;
            }
            let h = layer.ln2.apply(&x);
            let u: Vec<f64> = layer.up.apply(&h).into_iter().map(gelu).collect();
            let f = layer.down.apply(&u);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
        }
        cache.len += 1;
        Ok(self.head.apply(&self.ln_f.apply(&x)))
    }

    pub fn push_token(&self, cache: &mut KvCache, token: usize) -> Result<Vec<f64>> {
        if token >= VOCAB_SIZE {
            return Err(Error::Argument(format!("token {token} outside vocabulary")));
        }
        let row = self.tok_emb.row(token).to_vec();
        self.push_row(cache, &row)
    }

    /// Consumes `[task; memory; BOS]` and returns the cache with the logits for the first word.
    pub fn start(&self, task: Option<TaskKind>, memory: Option<&Tensor2>) -> Result<(KvCache, Vec<f64>)> {
        let mut cache = self.empty_cache();
        if let Some(t) = task {
            let row = self.task_emb.row(t.index()).to_vec();
            self.push_row(&mut cache, &row)?;
        }
        if let Some(m) = memory {
            for r in 0..m.rows() {
                self.push_row(&mut cache, m.row(r))?;
            }
        }
        let logits = self.push_token(&mut cache, BOS)?;
        Ok((cache, logits))
    }
}

impl StepModel for InferenceDecoder {
    type State = KvCache;

    fn step(&self, state: &mut KvCache, token: usize) -> Result<Vec<f64>> {
        self.push_token(state, token)
    }
}
