use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Named trainable tensors, addressed by [`ParamId`] in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "parameter '{name}' registered twice");
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Records every parameter on `tape` once.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| tape.param(ParamId(i), v))
                .collect(),
        }
    }

    /// Replaces values from `(name, tensor)` records, requiring an exact
    /// match of names and shapes.
    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
