//! Reverse-mode tape over [`Tensor2`] values.
//!
//! Every forward op appends a node holding its output; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for parameters that
//! were marked trainable when the graph was built.

use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::gemm;
use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Only parameters flagged trainable in the store.
    Trainable,
    /// Every parameter (finite-difference checks).
    All,
    /// No gradients; forward only.
    None,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Tensor2, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, k: usize, stride: usize, cols: Tensor2 },
    EdgePad { x: Var, n: usize },
    ConcatCols(Vec<Var>),
    Gather(Vec<(Var, usize)>),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<usize>, probs: Vec<Vec<f64>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Tensor2, count: usize },
}

struct Node {
    value: Option<Tensor2>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    mode: GradMode,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
pub struct Backward {
    pub params: ParamGrads,
    nodes: Vec<Option<Tensor2>>,
}

impl Backward {
    /// Gradient w.r.t. a node, if any flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.nodes[v.0].as_ref()
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: GradMode) -> Self {
        Self { store, mode, nodes: Vec::with_capacity(256), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor2, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.mode != GradMode::None && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor2) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked (used by gradient checks on activations).
    pub fn input_with_grad(&mut self, t: Tensor2) -> Var {
        let needs_grad = self.mode != GradMode::None;
        self.nodes.push(Node { value: Some(t), op: Op::Input, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.input(Tensor2::zeros(rows, cols))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let needs_grad = match self.mode {
            GradMode::All => true,
            GradMode::Trainable => self.store.get(id).trainable,
            GradMode::None => false,
        };
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.expect_id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Dimension(format!("matmul {ar}x{ac} by {br}x{bc}")));
        }
        let mut out = Tensor2::zeros(ar, bc);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a 1×C bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::Dimension(format!(
                "bias {:?} does not broadcast over {r}x{c}",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Tanh-approximated Gaussian-error unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut out = src.clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(shift) != (1, d) {
            return Err(Error::Dimension(format!("layer_norm gain/shift must be 1x{d}")));
        }
        let xs = self.value(x);
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let mut xhat = Tensor2::zeros(r, d);
        let mut out = Tensor2::zeros(r, d);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * inv;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + s[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, xhat, inv_std }, &[x, gain, shift]))
    }

    /// Valid (unpadded) strided 1-D convolution over time.
    ///
    /// `w` is `(k·C_in) × C_out` with row `j·C_in + c` holding tap `j`, input channel `c`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize) -> Result<Var> {
        let (t_in, c_in) = self.shape(x);
        let (wr, c_out) = self.shape(w);
        if k == 0 || stride == 0 {
            return Err(Error::Config(format!("conv1d kernel {k} and stride {stride} must be >= 1")));
        }
        if wr != k * c_in {
            return Err(Error::Dimension(format!(
                "conv1d weight has {wr} rows, expected k*C_in = {}",
                k * c_in
            )));
        }
        if self.shape(b) != (1, c_out) {
            return Err(Error::Dimension(format!("conv1d bias must be 1x{c_out}")));
        }
        if t_in < k {
            return Err(Error::Length(format!("conv1d input has {t_in} frames, kernel needs {k}")));
        }
        let t_out = (t_in - k) / stride + 1;
        let xs = self.value(x);
        let mut cols = Tensor2::zeros(t_out, k * c_in);
        for t in 0..t_out {
            let start = t * stride;
            cols.row_mut(t).copy_from_slice(&xs.data()[start * c_in..(start + k) * c_in]);
        }
        let mut out = Tensor2::zeros(t_out, c_out);
        gemm(&cols, false, self.value(w), false, &mut out, 0.0);
        let bias = self.value(b).data().to_vec();
        for i in 0..t_out {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, k, stride, cols }, &[x, w, b]))
    }

    /// Repeats the first and last frames `n` times on each side.
    pub fn edge_pad(&mut self, x: Var, n: usize) -> Result<Var> {
        let (t, c) = self.shape(x);
        if t == 0 {
            return Err(Error::Length("edge_pad on an empty sequence".into()));
        }
        let xs = self.value(x);
        let mut out = Tensor2::zeros(t + 2 * n, c);
        for i in 0..t + 2 * n {
            let src = i.saturating_sub(n).min(t - 1);
            out.row_mut(i).copy_from_slice(xs.row(src));
        }
        Ok(self.push(out, Op::EdgePad { x, n }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(Error::Alignment("concat_cols parts disagree on row count".into()));
        }
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor2::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            let c = v.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of `sources[i].0`.
    /// Covers embedding lookup, row slicing and row concatenation.
    pub fn gather(&mut self, sources: Vec<(Var, usize)>) -> Result<Var> {
        let cols = match sources.first() {
            Some((v, _)) => self.shape(*v).1,
            None => return Err(Error::Length("gather with no rows".into())),
        };
        let mut out = Tensor2::zeros(sources.len(), cols);
        for (i, (v, r)) in sources.iter().enumerate() {
            let src = self.value(*v);
            if src.cols() != cols {
                return Err(Error::Dimension("gather sources disagree on width".into()));
            }
            if *r >= src.rows() {
                return Err(Error::Length(format!("gather row {r} of {}-row tensor", src.rows())));
            }
            out.row_mut(i).copy_from_slice(src.row(*r));
        }
        let mut inputs: Vec<Var> = sources.iter().map(|s| s.0).collect();
        inputs.sort_by_key(|v| v.0);
        inputs.dedup();
        Ok(self.push(out, Op::Gather(sources), &inputs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.gather((start..start + len).map(|r| (x, r)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut src = Vec::new();
        for p in parts {
            let n = self.shape(*p).0;
            src.extend((0..n).map(|r| (*p, r)));
        }
        self.gather(src)
    }

    /// Multi-head causal attention core over packed sequences.
    ///
    /// `q`, `k`, `v` are `N×D` with `N = Σ segments`; each segment attends only
    /// within itself, and position `t` only to positions `≤ t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
        }
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(Error::Length(format!("segments sum to {}, tensor has {n} rows", segments.iter().sum::<usize>())));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor2::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut off = 0;
        for &len in segments {
            for h in 0..heads {
                let c0 = h * dh;
                // lower-triangular probabilities, row i holds i+1 entries
                let mut p = Vec::with_capacity(len * (len + 1) / 2);
                for i in 0..len {
                    let qi = &qs.row(off + i)[c0..c0 + dh];
                    let start = p.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &ks.row(off + j)[c0..c0 + dh];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        p.push(s);
                    }
                    let mut z = 0.0;
                    for s in &mut p[start..] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in &mut p[start..] {
                        *s /= z;
                    }
                    let orow = &mut out.row_mut(off + i)[c0..c0 + dh];
                    for (j, pj) in p[start..].iter().enumerate() {
                        let vj = &vs.row(off + j)[c0..c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
                probs.push(p);
            }
            off += len;
        }
        Ok(self.push(
            out,
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs },
            &[q, k, v],
        ))
    }

    /// Mean negative log-likelihood over rows where `mask` is set. Returns a 1×1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.shape(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension(format!(
                "{t} logit rows but {} targets and {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Argument("no supervised positions in batch".into()));
        }
        let lv = self.value(logits);
        let mut probs = Tensor2::zeros(t, vocab);
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::Argument(format!("target {} outside vocabulary of {vocab}", targets[i])));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[targets[i]];
            let pr = probs.row_mut(i);
            for (p, v) in pr.iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite cross-entropy {loss}")));
        }
        let out = Tensor2::filled(1, 1, loss);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        ))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.get(0, 0)
    }

    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension("backward needs a 1x1 loss".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::new(self.store.len());
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Ok(Backward { params, nodes: grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>], params: &mut ParamGrads) {
        let acc = |grads: &mut [Option<Tensor2>], v: Var, t: Tensor2| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, g.clone()),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let mut ga = Tensor2::zeros(g.rows(), bv.rows());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let mut gb = Tensor2::zeros(av.cols(), g.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    acc(grads, *b, gb);
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    acc(grads, *bias, column_sums(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    acc(grads, *x, g.scaled(*c));
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (o, xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *o *= gelu_grad(*xi);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let (r, d) = xhat.shape();
                if self.wants(*gain) {
                    let mut gg = Tensor2::zeros(1, d);
                    for i in 0..r {
                        for j in 0..d {
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(grads, *gain, gg);
                }
                if self.wants(*shift) {
                    acc(grads, *shift, column_sums(g));
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain).data();
                    let mut gx = Tensor2::zeros(r, d);
                    let mut dxh = vec![0.0; d];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = xhat.row(i);
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gain_v[j];
                            sum += dxh[j];
                            sum_xh += dxh[j] * xh[j];
                        }
                        let inv = inv_std[i];
                        let out = gx.row_mut(i);
                        for j in 0..d {
                            out[j] = inv * (dxh[j] - sum / d as f64 - xh[j] * sum_xh / d as f64);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Conv1d { x, w, b, k, stride, cols } => {
                if self.wants(*w) {
                    let mut gw = Tensor2::zeros(cols.cols(), g.cols());
                    gemm(cols, true, g, false, &mut gw, 0.0);
                    acc(grads, *w, gw);
                }
                if self.wants(*b) {
                    acc(grads, *b, column_sums(g));
                }
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let mut gcols = Tensor2::zeros(g.rows(), wv.rows());
                    gemm(g, false, wv, true, &mut gcols, 0.0);
                    let (t_in, c_in) = self.shape(*x);
                    let mut gx = Tensor2::zeros(t_in, c_in);
                    for t in 0..g.rows() {
                        let start = t * stride;
                        let dst = &mut gx.data_mut()[start * c_in..(start + k) * c_in];
                        for (d, s) in dst.iter_mut().zip(gcols.row(t)) {
                            *d += s;
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::EdgePad { x, n } => {
                if self.wants(*x) {
                    let (t, c) = self.shape(*x);
                    let mut gx = Tensor2::zeros(t, c);
                    for i in 0..g.rows() {
                        let src = i.saturating_sub(*n).min(t - 1);
                        for (d, s) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.wants(*p) {
                        let mut gp = Tensor2::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        acc(grads, *p, gp);
                    }
                    off += c;
                }
            }
            Op::Gather(sources) => {
                let mut local: HashMap<Var, Tensor2> = HashMap::new();
                for (i, (v, r)) in sources.iter().enumerate() {
                    if !self.wants(*v) {
                        continue;
                    }
                    let t = local.entry(*v).or_insert_with(|| {
                        let (rr, cc) = self.shape(*v);
                        Tensor2::zeros(rr, cc)
                    });
                    for (d, s) in t.row_mut(*r).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                let mut keys: Vec<Var> = local.keys().copied().collect();
                keys.sort_by_key(|v| v.0);
                for key in keys {
                    let t = local.remove(&key).expect("present");
                    acc(grads, key, t);
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (n, d) = self.shape(*q);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Tensor2::zeros(n, d);
                let mut gk = Tensor2::zeros(n, d);
                let mut gv = Tensor2::zeros(n, d);
                let mut off = 0;
                let mut pi = 0;
                let mut dp = Vec::new();
                for &len in segments {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let mut base = 0;
                        for i in 0..len {
                            let gi = &g.row(off + i)[c0..c0 + dh];
                            let prow = &p[base..base + i + 1];
                            dp.clear();
                            let mut weighted = 0.0;
                            for (j, pj) in prow.iter().enumerate() {
                                let vj = &vs.row(off + j)[c0..c0 + dh];
                                let dpj = dot(gi, vj);
                                dp.push(dpj);
                                weighted += pj * dpj;
                                let gvj = &mut gv.row_mut(off + j)[c0..c0 + dh];
                                for (o, gg) in gvj.iter_mut().zip(gi) {
                                    *o += pj * gg;
                                }
                            }
                            for (j, pj) in prow.iter().enumerate() {
                                let ds = pj * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &ks.row(off + j)[c0..c0 + dh];
                                let gqi = &mut gq.row_mut(off + i)[c0..c0 + dh];
                                for (o, kk) in gqi.iter_mut().zip(kj) {
                                    *o += ds * kk;
                                }
                                let qi = &qs.row(off + i)[c0..c0 + dh];
                                let gkj = &mut gk.row_mut(off + j)[c0..c0 + dh];
                                for (o, qq) in gkj.iter_mut().zip(qi) {
                                    *o += ds * qq;
                                }
                            }
                            base += i + 1;
                        }
                    }
                    off += len;
                }
                if self.wants(*q) {
                    acc(grads, *q, gq);
                }
                if self.wants(*k) {
                    acc(grads, *k, gk);
                }
                if self.wants(*v) {
                    acc(grads, *v, gv);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if self.wants(*logits) {
                    let scale = g.get(0, 0) / *count as f64;
                    let mut gl = Tensor2::zeros(probs.rows(), probs.cols());
                    for i in 0..probs.rows() {
                        if !mask[i] {
                            continue;
                        }
                        let out = gl.row_mut(i);
                        for (o, p) in out.iter_mut().zip(probs.row(i)) {
                            *o = p * scale;
                        }
                        out[targets[i]] -= scale;
                    }
                    acc(grads, *logits, gl);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}
