use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        tensor.check_finite(name)?;
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.params[id.0].tensor.data()
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.data_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.id(name)?;
        Some(&mut self.params[id.0].tensor)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Replaces the tensor stored under `name`; shapes must agree.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(alloc::format!(
                "`{}`: expected {:?}, got {:?}",
                name,
                slot.shape(),
                tensor.shape()
            )));
        }
        tensor.check_finite(name)?;
        *slot = tensor;
        Ok(())
    }

    /// FNV-1a over names, shapes and exact f64 bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for &d in p.tensor.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::rng::fnv1a64(&bytes)
    }
}

/// Gradient buffers aligned one-to-one with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Grads {
            data: store
                .params
                .iter()
                .map(|p| vec![0.0; p.tensor.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Clears the buffers of frozen parameters.
    pub fn mask_frozen(&mut self, store: &ParameterStore) {
        for (g, p) in self.data.iter_mut().zip(&store.params) {
            if !p.trainable {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(self.data.iter().flatten().map(|x| x * x).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}
