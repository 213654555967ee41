//! Named parameter storage.

use super::{Graph, Tensor, TensorId};
use indexmap::IndexMap;

/// Ordered map of parameter paths (e.g. `enc.l0.h2.k.stmt`) to tensors.
/// Insertion order is preserved so the optimizer and checkpoints enumerate
/// parameters identically on every run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a fresh parameter. Paths are code-controlled, so a duplicate
    /// is a naming bug and panics rather than returning an error.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let previous = self.params.insert(name.clone(), tensor);
        assert!(previous.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Load every parameter onto a tape as a tracked leaf, returning the
    /// name → id binding for this graph.
    pub fn bind_all(&self, graph: &mut Graph) -> ParamBinding {
        let mut ids = IndexMap::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            ids.insert(name.clone(), graph.leaf(tensor.clone(), true));
        }
        ParamBinding { ids }
    }

    /// Tensors in insertion order; pairs with [`ParamStore::bind_ids`] for
    /// callers (like the derivative checker) that create the leaves
    /// themselves.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.values().cloned().collect()
    }

    /// Associate externally created tape ids with this store's names, in
    /// insertion order. Panics if the count differs.
    pub fn bind_ids(&self, ids: &[TensorId]) -> ParamBinding {
        assert_eq!(
            ids.len(),
            self.params.len(),
            "expected one tape id per parameter"
        );
        let ids = self
            .params
            .keys()
            .cloned()
            .zip(ids.iter().copied())
            .collect();
        ParamBinding { ids }
    }
}

/// Tape ids for every parameter bound into one graph.
pub struct ParamBinding {
    ids: IndexMap<String, TensorId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound into this graph"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::scalar(1.0));
        store.insert("a", Tensor::scalar(2.0));
        store.insert("c", Tensor::scalar(3.0));
        let names: Vec<&String> = store.names().collect();
        assert_eq!(names, vec!["b", "a", "c"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        store.insert("w", Tensor::scalar(1.0));
    }

    #[test]
    fn binding_exposes_every_parameter() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.insert("b", Tensor::vector(vec![0.5, 0.5]));
        let mut graph = Graph::new();
        let binding = store.bind_all(&mut graph);
        assert_eq!(binding.len(), 2);
        assert_eq!(graph.value(binding.id("w")).data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(store.scalar_count(), 6);
    }
}
