//! Named trainable tensors with gradient slots, plus the SGD step and the
//! MaxNorm row projection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Ordered map name -> (value, gradient). Iteration order is the sorted name
/// order, which keeps every parameter sweep deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Entry { value, grad });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// value <- value - lr * grad for every entry, then zero all gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        for (name, e) in self.entries.iter() {
            if !e.grad.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        for e in self.entries.values_mut() {
            for (v, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
                *v -= lr * g;
            }
        }
        self.zero_grads();
        Ok(())
    }
}

/// Rescale every row of a [C, D] matrix whose L2 norm exceeds `delta` back to
/// norm exactly `delta`. Rows inside the ball (including zero rows) are left
/// untouched.
pub fn maxnorm_project(matrix: &mut Tensor, delta: f64) -> Result<()> {
    if matrix.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "maxnorm_project",
            detail: format!("expected matrix, got {:?}", matrix.shape()),
        });
    }
    let d = matrix.shape()[1];
    let rows = matrix.shape()[0];
    for r in 0..rows {
        let row = &mut matrix.data_mut()[r * d..(r + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > delta {
            let scale = delta / norm;
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(())
}
