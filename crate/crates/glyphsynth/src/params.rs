//! Named parameter storage shared by model construction, the optimizer
//! and checkpointing.
//!
//! Parameters live in a `BTreeMap` so every iteration order — updates,
//! serialization, gradient clipping — is deterministic. A parameter may
//! pin individual rows: pinned rows have their gradients zeroed before
//! any update, which keeps them (and their Adam moments) exactly at their
//! initial values. The codebook uses this to hold entry 0 at zero.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    pinned: BTreeMap<String, Vec<usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Mark a row as immutable under training.
    pub fn pin_row(&mut self, name: &str, row: usize) -> Result<()> {
        let t = self.get(name)?;
        if row >= t.rows() {
            return Err(Error::Config(format!(
                "cannot pin row {row} of {name:?} with {} rows",
                t.rows()
            )));
        }
        let rows = self.pinned.entry(name.to_string()).or_default();
        if !rows.contains(&row) {
            rows.push(row);
            rows.sort_unstable();
        }
        Ok(())
    }

    pub fn pinned_rows(&self, name: &str) -> &[usize] {
        self.pinned.get(name).map_or(&[], Vec::as_slice)
    }

    /// Zero the gradient rows of every pinned parameter row, so optimizer
    /// moments and updates for those rows stay exactly zero.
    pub fn zero_pinned_grads(&self, grads: &mut BTreeMap<String, Tensor>) {
        for (name, rows) in &self.pinned {
            if let Some(g) = grads.get_mut(name) {
                for &r in rows {
                    if r < g.rows() {
                        g.row_mut(r).fill(0.0);
                    }
                }
            }
        }
    }
}

/// Cache of parameter leaves bound into one [`Graph`], so each parameter
/// appears exactly once per graph and its gradient can be routed back to
/// its name after the backward pass.
#[derive(Default, Debug)]
pub struct GraphParams {
    ids: BTreeMap<String, NodeId>,
}

impl GraphParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Node for a named parameter, inserting a differentiable leaf on
    /// first use.
    pub fn node(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = g.leaf(store.get(name)?.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register an already-created node under a parameter name (used by
    /// gradient-check harnesses that construct leaves up front).
    pub fn bind_existing(&mut self, name: &str, id: NodeId) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }

    /// Pull the gradient of every bound parameter out of a backward pass.
    /// Parameters that did not influence the loss get zero gradients.
    pub fn collect_grads(&self, g: &Graph, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let grad = grads.take(id).unwrap_or_else(|| {
                let t = g.value(id);
                Tensor::zeros(t.rows(), t.cols())
            });
            out.insert(name.clone(), grad);
        }
        out
    }
}
