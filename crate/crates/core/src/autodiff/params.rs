use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub(crate) usize);

/// Which part of the model a parameter group belongs to. The L2 penalty
/// skips `Bilstm`; ablation bookkeeping reads `PerAspect`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCategory {
    Embedding,
    Bilstm,
    Shared,
    PerAspect(usize),
}

impl fmt::Display for ParamCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamCategory::Embedding => f.write_str("embedding"),
            ParamCategory::Bilstm => f.write_str("bilstm"),
            ParamCategory::Shared => f.write_str("shared"),
            ParamCategory::PerAspect(j) => write!(f, "per_aspect({j})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub category: ParamCategory,
    pub params: Vec<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamEntry {
    name: String,
    group: GroupId,
    value: Tensor,
    trainable: bool,
}

/// Owns every trainable tensor of a model. Graphs borrow it immutably
/// during a forward/backward pass; optimizers mutate it between passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: impl Into<String>, category: ParamCategory) -> GroupId {
        self.groups.push(ParamGroup {
            name: name.into(),
            category,
            params: Vec::new(),
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn add(&mut self, group: GroupId, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
            trainable: true,
        });
        self.groups[group.0].params.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn group_of(&self, id: ParamId) -> &ParamGroup {
        &self.groups[self.entries[id.0].group.0]
    }

    pub fn category(&self, id: ParamId) -> ParamCategory {
        self.group_of(id).category
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup {
        &self.groups[id.0]
    }

    /// Count of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "snapshot has {} tensors, store has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for (entry, v) in self.entries.iter().zip(values) {
            if entry.value.shape() != v.shape() {
                return Err(Error::shape("restore", entry.value.shape(), v.shape()));
            }
        }
        for (entry, v) in self.entries.iter_mut().zip(values) {
            entry.value.clone_from(v);
        }
        Ok(())
    }
}

/// Dense gradient accumulator aligned with a [`ParamStore`]. Slots are
/// allocated on first write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    slots: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.slots.get_mut(id.0).and_then(Option::as_mut)
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Gradient values, or zeros when the parameter was never reached.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().flatten().for_each(|t| t.fill(0.0));
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Rescales each gradient tensor in `group` whose own L2 norm exceeds
/// `max_norm` down to exactly `max_norm`.
pub fn clip_gradient_norm(grads: &mut GradStore, group: &ParamGroup, max_norm: f64) {
    for &id in &group.params {
        if let Some(g) = grads.get_mut(id) {
            let norm = g.l2_norm();
            if norm > max_norm {
                g.scale_in_place(max_norm / norm);
            }
        }
    }
}

/// Joint clipping: if the norm over every gradient exceeds `max_norm`,
/// all gradients are scaled by the same factor.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.slots.iter_mut().flatten().for_each(|t| t.scale_in_place(factor));
    }
}
