use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use super::{NumericsError, Result};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar = f32> {
    pub id: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: id.into(),
            value,
            grad,
        }
    }
}

/// Parameters keyed by stable name. Iteration order is the name order, which
/// keeps serialisation and gradient reduction deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

/// Graph leaves created for each parameter by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    ids: BTreeMap<String, NodeId>,
}

impl Bindings {
    /// Node of a bound parameter. Panics if the model asks for a name it never registered.
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.params.insert(name.clone(), Parameter::new(name, value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            id: p.id.clone(),
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Merges another store's parameters into this one (names must not collide).
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, p) in other.params {
            if self.params.contains_key(&k) {
                return Err(NumericsError::Contract(format!("duplicate parameter `{k}`")));
            }
            self.params.insert(k, p);
        }
        Ok(())
    }

    /// Inserts every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<Bindings> {
        let mut ids = BTreeMap::new();
        for (k, p) in &self.params {
            ids.insert(k.clone(), graph.param(p.value.clone())?);
        }
        Ok(Bindings { ids })
    }

    /// Adds the gradients of every bound leaf into the parameter grads.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients<T>) -> Result<()> {
        for (name, id) in bindings.iter() {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), grads.get(id)) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn add_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| NumericsError::Contract(format!("unknown parameter `{name}`")))?;
        p.grad.add_assign(g)
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in self.params.values_mut() {
            p.grad = p.grad.scale(s);
        }
    }

    /// Snapshot of all gradients keyed by name.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.grad.clone()))
            .collect()
    }
}
