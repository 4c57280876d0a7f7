use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to one tensor inside a [`ParamStore`].
///
/// Handles remember which store created them, so gradients computed against
/// one store cannot be applied to another by accident. Cloned stores keep the
/// same identity and accept the same handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Named, ordered collection of trainable tensors. Every tensor carries a
/// gradient buffer.
#[derive(Debug, Clone)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        tensor.enable_grad();
        let index = self.tensors.len();
        self.by_name.insert(name.clone(), index);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId {
            store: self.id,
            index,
        })
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId {
            store: self.id,
            index,
        })
    }

    /// Looks up a parameter by name and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name:?}")))?;
        let actual = self.get(id).shape();
        if actual != shape {
            return Err(Error::Data(format!(
                "parameter {name:?} has shape {actual:?}, expected {shape:?}"
            )));
        }
        Ok(id)
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && id.index < self.tensors.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert!(self.owns(id), "parameter handle from another store");
        &self.tensors[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(self.owns(id), "parameter handle from another store");
        &mut self.tensors[id.index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (&id, g) in &grads.by_param {
            if !self.owns(id) {
                return Err(Error::Contract(
                    "gradients were computed against a different parameter store".into(),
                ));
            }
            self.tensors[id.index].accumulate_grad(g);
        }
        Ok(())
    }

    /// Concatenated little-endian bytes of every value, in insertion order.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
