use std::collections::HashMap;

use super::{Gradients, NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn load_map(&mut self, map: &HashMap<String, Tensor>) -> Result<(), String> {
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = map
                .get(name)
                .ok_or_else(|| format!("missing tensor {name}"))?;
            if src.shape() != tensor.shape() {
                return Err(format!(
                    "tensor {name}: shape {:?} != {:?}",
                    src.shape(),
                    tensor.shape()
                ));
            }
            *tensor = src.clone();
        }
        Ok(())
    }
}

/// One forward pass's leaf bindings of a [`ParamSet`] onto a tape.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(params: &ParamSet, tape: &mut Tape) -> Self {
        let nodes = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradient per parameter, in registration order.
    pub fn grads(&self, grads: &mut Gradients, tape: &Tape) -> Vec<Tensor> {
        self.nodes.iter().map(|&n| grads.take(n, tape)).collect()
    }
}
