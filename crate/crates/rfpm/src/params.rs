//! Named parameter store shared by the pyramid, decoder and trainer.
//!
//! Parameters live in a sorted map so that every iteration order (init,
//! gradient reduction, checkpoint layout) is deterministic.

use std::collections::BTreeMap;

use crate::autodiff::{Conv2dParams, Node, Tape};
use crate::error::{Result, RfpmError};
use crate::tensor::Tensor;

/// Plain-tensor parameters keyed by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(RfpmError::Config(format!("duplicate parameter {name}")));
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Registers `{prefix}.weight` and `{prefix}.bias`.
    pub fn insert_conv(&mut self, prefix: &str, conv: Conv2dParams) -> Result<()> {
        self.insert(&format!("{prefix}.weight"), conv.weight)?;
        self.insert(&format!("{prefix}.bias"), conv.bias)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| RfpmError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| RfpmError::Config(format!("missing parameter {name}")))
    }

    /// Replaces an existing entry; the shape must stay unchanged.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(RfpmError::Shape(format!(
                "parameter {name}: cannot replace shape {:?} with {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on a tape; names accepted by `trainable` become
    /// gradient-tracked leaves, the rest stay constants.
    pub fn leaves(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> ParamNodes {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let node = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.leaf(v.clone())
                };
                (k.clone(), node)
            })
            .collect();
        ParamNodes { map }
    }
}

/// Tape-resident view of a [`ParamStore`].
pub struct ParamNodes {
    map: BTreeMap<String, Node>,
}

impl ParamNodes {
    /// Wraps an existing name-to-node map (used by verification harnesses
    /// that construct leaves themselves).
    pub fn from_map(map: BTreeMap<String, Node>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<Node> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| RfpmError::Config(format!("missing parameter {name}")))
    }

    /// Weight/bias node pair for a conv prefix.
    pub fn conv(&self, prefix: &str) -> Result<(Node, Node)> {
        Ok((
            self.get(&format!("{prefix}.weight"))?,
            self.get(&format!("{prefix}.bias"))?,
        ))
    }

    /// Gradients accumulated on trainable leaves, in name order.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.map
            .iter()
            .filter_map(|(k, n)| n.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_duplicate() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[2, 2])).is_err());
        assert_eq!(s.get("a.weight").unwrap().numel(), 4);
        assert!(matches!(s.get("missing"), Err(RfpmError::Config(_))));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::zeros(&[2])).unwrap();
        assert!(s.set("p", Tensor::zeros(&[3])).is_err());
        s.set("p", Tensor::ones(&[2])).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn leaves_respect_trainable_filter() {
        let mut s = ParamStore::new();
        s.insert("frozen.w", Tensor::ones(&[1])).unwrap();
        s.insert("live.w", Tensor::ones(&[1])).unwrap();
        let tape = Tape::new();
        let nodes = s.leaves(&tape, |n| n.starts_with("live"));
        let loss = nodes
            .get("live.w")
            .unwrap()
            .add(&nodes.get("frozen.w").unwrap())
            .unwrap()
            .sum_all();
        loss.backward().unwrap();
        let grads = nodes.grads();
        assert!(grads.contains_key("live.w"));
        assert!(!grads.contains_key("frozen.w"));
    }
}
