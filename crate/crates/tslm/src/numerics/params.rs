//! Named parameter storage and per-forward binding onto a tape.

use std::collections::BTreeMap;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// One named parameter. Frozen entries (`trainable == false`) still bind to
/// the tape but never receive gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate parameter `{name}`");
        self.entries.insert(name, ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| NumericsError::UnknownParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries.get_mut(name).ok_or_else(|| NumericsError::UnknownParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }
}

/// Binds parameters from a [`ParamSet`] onto a tape, once per name per
/// forward pass, and remembers which node each name maps to so gradients
/// can be collected afterwards.
pub struct Binder<'a> {
    params: &'a ParamSet,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self { params, bound: BTreeMap::new() }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Node for `name`, creating the leaf on first use.
    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let entry = self.params.get(name)?;
        let id = tape.leaf(entry.tensor.clone(), entry.trainable);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients for every trainable parameter that was bound, in name order.
    pub fn collect_grads(&self, tape: &Tape, grads: &super::tape::Grads) -> BTreeMap<String, Tensor> {
        let _ = tape;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if !self.params.get(name).map(|e| e.trainable).unwrap_or(false) {
                continue;
            }
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_nodes() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0, 2.0]), true);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let a = binder.bind(&mut tape, "w").unwrap();
        let b = binder.bind(&mut tape, "w").unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn unknown_parameter_is_error() {
        let params = ParamSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        assert!(binder.bind(&mut tape, "nope").is_err());
    }
}
