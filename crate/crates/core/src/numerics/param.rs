//! Named trainable parameters and their gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name: name.into(), value, grad }
    }
}

/// An ordered collection of parameters. Insertion order is the canonical
/// order for checkpoints, optimizer state and gradient reduction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    /// `N(0, 1/fan_in)` weights for a `[fan_in x fan_out]` projection.
    pub fn add_linear_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::randn(&[fan_in, fan_out], std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * d(loss)/d(param)` for every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients, scale: f64) {
        for &(var, id) in tape.bindings() {
            if let Some(g) = grads.get(var) {
                for (o, &gi) in self.params[id.0].grad.data_mut().iter_mut().zip(g.data()) {
                    *o += scale * gi;
                }
            }
        }
    }

    /// Flat copy of all gradients in canonical order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    /// Adds a flat gradient vector (same layout as [`Self::flat_grads`]).
    pub fn add_flat_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "flat gradient of {} for {} coordinates",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.grad.numel();
            for (o, &g) in p.grad.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *o += g;
            }
            off += n;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Overwrites values from `other` by name; every parameter here must be
    /// present there with an identical shape.
    pub fn load_from(&mut self, other: &[Parameter]) -> Result<()> {
        let lookup: HashMap<&str, &Parameter> =
            other.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut self.params {
            let src = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(ps.add("a", Tensor::zeros(&[2])), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_shape_tracks_value_and_zeroes() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::full(&[2, 3], 1.0)).unwrap();
        assert_eq!(ps.get(id).grad.shape(), &[2, 3]);
        ps.add_flat_grads(&[1.0; 6]).unwrap();
        assert_eq!(ps.grad_norm(), 6f64.sqrt());
        ps.zero_grad();
        assert_eq!(ps.grad_norm(), 0.0);
        assert!(ps.add_flat_grads(&[1.0; 5]).is_err());
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        let good = vec![Parameter::new("w", Tensor::full(&[2], 3.0))];
        ps.load_from(&good).unwrap();
        assert_eq!(ps.value(ps.find("w").unwrap()).data(), &[3.0, 3.0]);
        let wrong_shape = vec![Parameter::new("w", Tensor::zeros(&[3]))];
        assert!(ps.load_from(&wrong_shape).is_err());
        assert!(ps.load_from(&[]).is_err());
    }
}
