use std::collections::BTreeMap;

use super::{Gradients, Graph, NumericsError, Tensor, Var};

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
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

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalars under names starting with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

/// Lazily binds parameters of a [`ParamSet`] onto a [`Graph`].
///
/// Only parameters actually touched by a forward pass become leaves, so
/// adapters of scenarios absent from a batch receive no gradient.
pub struct Binder<'p> {
    params: &'p ParamSet,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    /// Every bound parameter requires gradients.
    pub fn trainable(params: &'p ParamSet) -> Self {
        Self::with_filter(params, |_| true)
    }

    /// Bound parameters are constants (inference).
    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::with_filter(params, |_| false)
    }

    pub fn with_filter(params: &'p ParamSet, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            params,
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?;
        let v = g.leaf(t.clone(), (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named gradients for every bound trainable parameter that received one.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|t| (n.clone(), t)))
            .collect()
    }
}
