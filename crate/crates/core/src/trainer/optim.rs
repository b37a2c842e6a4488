use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGrads, ParamStore, Tensor2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// Adam with decoupled weight decay and global-norm clipping. Only trainable
/// parameters that received a gradient this step are touched.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Tensor2>>,
    v: Vec<Option<Tensor2>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        AdamW { cfg, m: vec![None; store.len()], v: vec![None; store.len()], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads, lr: f64) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        if norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            // parameters outside this step's graph are skipped, as with absent gradients
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let shape = store.value(id).shape();
            let m = self.m[i].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1));
            let v = self.v[i].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1));
            let p = store.value_mut(id);
            for (((pj, mj), vj), gj) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let upd = (*mj / bc1) / ((*vj / bc2).sqrt() + c.eps);
                *pj -= lr * (upd + c.weight_decay * *pj);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{GradMode, Graph};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor2::from_rows(&[&[1.0, -2.0][..]]), true);
        let frozen = store.insert("f", Tensor2::from_rows(&[&[5.0][..]]), false);
        let cfg = AdamWConfig { weight_decay: 0.0, clip_norm: 1e9, ..Default::default() };
        let mut opt = AdamW::new(&store, cfg);
        let mut grads = {
            let mut g = Graph::new(&store, GradMode::Trainable);
            let p = g.param(id);
            let f = g.param(frozen);
            let ones = g.input(Tensor2::filled(2, 1, 1.0));
            let s = g.matmul(p, ones).unwrap();
            let s = g.matmul(s, f).unwrap();
            g.backward(s).unwrap().params
        };
        opt.step(&mut store, &mut grads, 0.1).unwrap();
        let p = store.value(id);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) + 2.1).abs() < 1e-6);
        assert_eq!(store.value(frozen).get(0, 0), 5.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor2::filled(2, 2, 0.7), true);
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut grads = ParamGrads::new(store.len());
        opt.step(&mut store, &mut grads, 0.0).unwrap();
        assert_eq!(store.value(id), &before);
    }
}
