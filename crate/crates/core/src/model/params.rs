//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid("params", format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Replace the tensor at position `i`; the shape must not change.
    pub fn set(&mut self, i: usize, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(invalid(
                "params",
                format!(
                    "{}: shape {:?} != {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                ),
            ));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalars per top-level name prefix (text before the first `.`).
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let key = n.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += t.len(),
                None => out.push((key, t.len())),
            }
        }
        out
    }

    /// Register every tensor in `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a [`Params`] set.
pub struct Bound<'a, T> {
    params: &'a Params<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> Bound<'a, T> {
    /// Pair `params` with externally created graph variables, one per tensor in order.
    pub fn from_vars(params: &'a Params<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(invalid(
                "params",
                format!("{} vars for {} parameters", vars.len(), params.len()),
            ));
        }
        Ok(Self { params, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid("params", format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter order; missing gradients are zeros.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Seeded parameter initialiser.
pub struct ParamInit<T> {
    pub params: Params<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamInit<T> {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            params: Params::new(),
            rng,
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Weight `(fan_in, fan_out)` uniform in ±1/√fan_in (zeros if `zero`), plus zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Result<()> {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        self.params.insert(format!("{name}.w"), w)?;
        self.params
            .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))
    }

    pub fn layernorm(&mut self, name: &str, width: usize) -> Result<()> {
        self.params
            .insert(format!("{name}.gamma"), Tensor::full(&[width], T::one()))?;
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(&[width]))
    }

    /// Channel-last conv kernel `(kt, kf, cin, cout)` plus zero bias.
    pub fn conv2d(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        let w = self.uniform(&[k, k, cin, cout], 1.0 / ((k * k * cin) as f64).sqrt());
        self.params.insert(format!("{name}.w"), w)?;
        self.params
            .insert(format!("{name}.b"), Tensor::zeros(&[cout]))
    }

    /// Depthwise kernel `(channels, k)` plus zero bias.
    pub fn depthwise(&mut self, name: &str, channels: usize, k: usize) -> Result<()> {
        let w = self.uniform(&[channels, k], 1.0 / (k as f64).sqrt());
        self.params.insert(format!("{name}.w"), w)?;
        self.params
            .insert(format!("{name}.b"), Tensor::zeros(&[channels]))
    }

    pub fn raw(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.params.insert(name, t)
    }
}
