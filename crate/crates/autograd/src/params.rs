use std::collections::BTreeMap;
use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<Arc<Tensor<T>>>,
}

/// Leaf handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), index: BTreeMap::new(), values: Vec::new() }
    }

    /// Registers a parameter and returns its id. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, id: usize, value: Tensor<T>) -> Result<()> {
        self.values[id].check_same_shape(&value)?;
        self.values[id] = Arc::new(value);
        Ok(())
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Adds every parameter to `graph` as a leaf.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> ParamVars {
        ParamVars(self.values.iter().map(|v| graph.leaf_shared(Arc::clone(v), trainable)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}
