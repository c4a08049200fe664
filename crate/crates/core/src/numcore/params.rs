use std::collections::HashMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Matrix::zeros(e.value.rows(), e.value.cols());
        }
    }

    /// Overwrites every stored gradient.
    pub fn set_grads(&mut self, grads: Gradients<T>) -> Result<()> {
        if grads.0.len() != self.entries.len() {
            return Err(Error::shape("set_grads", "gradient count"));
        }
        for (e, g) in self.entries.iter_mut().zip(grads.0) {
            if g.shape() != e.value.shape() {
                return Err(Error::shape("set_grads", e.name.clone()));
            }
            e.grad = g;
        }
        Ok(())
    }

    /// Zero gradients shaped like this store.
    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients(
            self.entries
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        )
    }
}

/// Gradient buffer parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(Vec<Matrix<T>>);

impl<T: Scalar> Gradients<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.0[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.0[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix<T>) -> Result<()> {
        self.0[id.0].add_assign(g)
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for m in &mut self.0 {
            for v in m.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.0.iter()
    }
}
