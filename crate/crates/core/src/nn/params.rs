use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Insert a standard-normal tensor unless `name` already exists.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) {
        if !self.contains(name) {
            self.insert(name, Tensor::randn(shape, rng));
        }
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        if !self.contains(name) {
            self.insert(name, Tensor::zeros(shape));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Register every tensor in `graph`, as leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters registered in a graph.
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not initialised"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.vars.values().copied().collect()
    }

    /// Gradients of `loss` for every bound parameter, keyed by name.
    pub fn grads(&self, graph: &'g Graph, loss: Var<'g>) -> BTreeMap<String, Tensor> {
        let names = self.names();
        let vars = self.vars();
        let grads = graph.grad(loss, &vars);
        names
            .into_iter()
            .zip(grads)
            .map(|(n, g)| (n, g.value().as_ref().clone()))
            .collect()
    }
}
