use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    AdapterWeight,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not learnable parameters.
    pub fn is_buffer(&self) -> bool {
        matches!(self, Self::RunningMean | Self::RunningVar)
    }

    pub fn is_norm_affine(&self) -> bool {
        matches!(self, Self::NormScale | Self::NormShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
}

/// Flat arena of every tensor owned by the network.
#[derive(Clone, Debug)]
pub struct ParamStore<E> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self {
            infos: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.infos.push(ParamInfo { name, kind });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn num_parameters(&self) -> usize {
        self.ids()
            .filter(|id| !self.info(*id).kind.is_buffer())
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn count_where(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.get(*id).numel()).sum()
    }

    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        ParamStore {
            infos: self.infos.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Gradient slot per parameter; `None` means no gradient was produced.
#[derive(Clone, Debug)]
pub struct Grads<E> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Grads<E> {
    pub fn new(len: usize) -> Self {
        Self {
            slots: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<E>) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub(crate) fn accumulate_vec(&mut self, id: ParamId, shape: [usize; 4], g: Vec<E>) {
        self.accumulate(id, Tensor::from_vec(shape, g).expect("gradient shape"));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn scale(&mut self, k: E) {
        for t in self.slots.iter_mut().flatten() {
            t.scale(k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.all_finite())
    }
}
