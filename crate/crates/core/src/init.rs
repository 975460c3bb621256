//! Named parameter collections and their initializers.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::RunningStats;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for fixed tensors and running statistics.
    pub requires_grad: bool,
}

/// Ordered map of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param store", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                requires_grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("param store set", format!("{:?}", p.value.shape()), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
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

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|p| p.requires_grad).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            requires_grad: p.requires_grad,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers trainable entries as graph parameters and fixed entries as
    /// constants. Entries named `*.running_mean` / `*.running_var` stay off
    /// the graph and are exposed as buffers.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound<T>> {
        let mut vars = IndexMap::new();
        let mut buffers = IndexMap::new();
        for p in self.iter() {
            if is_buffer(&p.name) {
                buffers.insert(p.name.clone(), p.value.clone());
                continue;
            }
            let v = if p.requires_grad {
                g.param(&p.name, p.value.clone())?
            } else {
                g.constant(p.value.clone())
            };
            vars.insert(p.name.clone(), v);
        }
        Ok(Bound { vars, buffers })
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound<T> {
    vars: IndexMap<String, Var>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Bound<T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    /// Replaces the handle for `name`, e.g. to differentiate with respect to
    /// one tensor only.
    pub fn with_override(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_owned(), v);
        self
    }

    /// Running statistics stored under `{prefix}.running_mean/var`.
    pub fn running_stats(&self, prefix: &str) -> RunningStats<T> {
        RunningStats {
            mean: self.buffers.get(&format!("{prefix}.running_mean")).cloned(),
            var: self.buffers.get(&format!("{prefix}.running_var")).cloned(),
        }
    }
}

/// Framework-default uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// `scale · Q` for a random orthogonal `n x n` matrix `Q` (Gram-Schmidt on
/// a Gaussian matrix).
pub fn orthogonal<T: Real, R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Tensor<T> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        rows.push(v.into_iter().map(|x| x / norm).collect());
    }
    Tensor::from_fn(&[n, n], |i| T::lit(rows[i / n][i % n] * scale))
}
