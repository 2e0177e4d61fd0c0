//! Named parameter collections and their gradients.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered name → tensor map. Iteration order is insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar elements.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        self.bind_with(tape, true)
    }

    /// Records every tensor as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let mut b = Bindings::default();
        for (name, t) in &self.entries {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            b.vars.insert(name.clone(), v);
        }
        b
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Variables a [`ParamSet`] was recorded as on one tape.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    /// Variable for `name`. Panics on unknown names: parameter names are
    /// fixed by the model layout and validated on load.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn extend(&mut self, other: Bindings) {
        self.vars.extend(other.vars);
    }

    /// Gradients of the bound parameters after `tape.backward`; parameters
    /// the loss does not reach get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> GradSet<T> {
        let mut entries: Vec<(String, Vec<T>)> = self
            .vars
            .iter()
            .map(|(n, &v)| {
                let g = match tape.grad(v) {
                    Some(g) => g.to_vec(),
                    None => vec![T::zero(); tape.value(v).len()],
                };
                (n.clone(), g)
            })
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        GradSet { entries }
    }
}

/// Flat gradients keyed by parameter name, sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T> {
    entries: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> GradSet<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn global_norm(&self) -> T {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> T {
        let norm = self.global_norm();
        let max = T::from_f64_lossy(max_norm);
        if max_norm > 0.0 && norm > max {
            let s = max / norm;
            for (_, g) in &mut self.entries {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z = rng::normal(rng);
            if z.abs() <= 2.0 {
                break T::from_f64_lossy(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}
