use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

/// Checkpoint record: a parameter name with its shape header and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor: t,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Records every parameter as a leaf, in order.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.tensor.clone())).collect()
    }

    /// Pulls this set's gradients out of `grads` in parameter order.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Option<Tensor>> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads weights into an existing layout, rejecting mismatched checkpoints.
    pub fn load_into(&mut self, loaded: ParamSet) -> Result<()> {
        if !self.same_layout(&loaded) {
            return Err(invalid("checkpoint layout does not match the model"));
        }
        *self = loaded;
        Ok(())
    }
}
