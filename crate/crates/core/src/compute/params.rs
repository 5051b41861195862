//! Named, grouped trainable parameters shared by every forward pass.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ClsrError, Result};

/// Parameter groups are the unit of freezing between training stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    SpeechEncoder,
    Cif,
    Decoder,
    TextEncoder,
    /// Linear adapter used only by the no-quantizer ablation.
    Projection,
}

impl ParamGroup {
    /// Groups making up the recognition branch.
    pub const ASR: [ParamGroup; 3] = [ParamGroup::SpeechEncoder, ParamGroup::Cif, ParamGroup::Decoder];
}

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
    pub group: ParamGroup,
    pub(crate) value: Arc<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen: BTreeSet<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn set_frozen(&mut self, groups: &[ParamGroup]) {
        self.frozen = groups.iter().copied().collect();
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id.0].group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.frozen.iter().copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = self.value(id).shape();
        if current != value.shape() {
            return Err(ClsrError::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.params[id.0].name,
                current,
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }
}
