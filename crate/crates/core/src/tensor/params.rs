use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::{Tape, Tensor, Var};
use crate::error::{config_err, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameters in registration order. A tensor's `requires_grad` flag
/// decides whether it is trainable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn trainable(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.add(name, tensor.with_requires_grad(true))
    }

    pub fn frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.add(name, tensor.with_requires_grad(false))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.get(id).requires_grad())
            .collect()
    }

    pub fn count_total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    /// Adds gradients into the trainable tensors' buffers, scaled by `scale`.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            self.tensors[id.0].accumulate_grad(&scaled)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// A tape plus lazy binding of store parameters to tape leaves.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape leaf for a parameter, recorded once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of `loss` w.r.t. every bound trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.get(*v) {
                    out.push((ParamId(i), g.to_vec()));
                }
            }
        }
        Ok(ParamGrads { grads: out })
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Per-parameter gradients from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
