use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        Parameter { value, grad: None }
    }

    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

/// Named trainable tensors with gradient buffers of the same shapes.
///
/// Iteration is ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    /// Gradient of `name`; zeros if nothing has been accumulated.
    pub fn grad(&self, name: &str) -> Result<Tensor> {
        self.get(name).map(Parameter::grad_or_zeros)
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?;
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .map(Tensor::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                for v in g.values_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut ps = ParameterSet::new();
        ps.insert("a", Tensor::vector(vec![0.0, 0.0]));
        ps.accumulate_grad("a", &Tensor::vector(vec![30.0, 40.0]))
            .unwrap();
        let before = ps.clip_grad_norm(5.0);
        assert_eq!(before, 50.0);
        assert!((ps.global_grad_norm() - 5.0).abs() < 1e-12);
        assert_eq!(ps.grad("a").unwrap().values(), &[3.0, 4.0]);
    }

    #[test]
    fn iteration_is_sorted_by_name() {
        let mut ps = ParameterSet::new();
        for n in ["z", "a", "m"] {
            ps.insert(n, Tensor::scalar(0.0));
        }
        assert_eq!(ps.names().collect::<Vec<_>>(), vec!["a", "m", "z"]);
    }
}
