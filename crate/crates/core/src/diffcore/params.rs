use std::collections::HashMap;

use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub trainable: bool,
}

/// Named parameter tensors in insertion order. Insertion order is the
/// serialization order and the optimizer iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Applies `trainable = pred(name)` to every parameter.
    pub fn set_trainable_by<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect()
    }

    /// Overwrites values of parameters present in `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != p.value.shape() {
                    return Err(Error::Dimension(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        p.name,
                        dst.shape(),
                        p.value.shape()
                    )));
                }
                *dst = p.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Gradient slots aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    slots: Vec<Option<Tensor2>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self { slots: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor2) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }

    /// Euclidean norm of the gradients of parameters whose names start with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        self.iter()
            .filter(|(id, _)| store.get(*id).name.starts_with(prefix))
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= alpha;
            }
        }
    }
}
