use super::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Records every parameter as a gradient-carrying leaf. The returned
    /// vector is indexed by [`ParamId::index`].
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| graph.constant(t.clone()))
            .collect()
    }

    /// Records only `ids` as constants; other slots point at a shared
    /// placeholder and must not be used by the caller.
    pub fn bind_subset(&self, graph: &mut Graph, ids: &[ParamId]) -> Vec<NodeId> {
        let placeholder = graph.constant(Tensor::scalar(0.0));
        let mut bound = vec![placeholder; self.tensors.len()];
        for &id in ids {
            bound[id.0] = graph.constant(self.tensors[id.0].clone());
        }
        bound
    }
}
