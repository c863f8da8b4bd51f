use std::collections::HashMap;

use super::{Graph, Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// L2 decay applies only where set (kernels and weight matrices).
    pub weight_decay: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, weight_decay: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(arg_err!("duplicate parameter name {name}"));
        }
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            weight_decay,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Places every parameter on the tape; the returned vars are indexed
    /// like the store.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }
}

/// SGD with Nesterov momentum and L2 decay on flagged parameters:
///
/// ```text
/// g ← ∇ + l2·θ        (decay-flagged only)
/// v ← μ·v − lr·g
/// θ ← θ + μ·v − lr·g
/// ```
#[derive(Clone, Debug)]
pub struct SgdNesterov<T> {
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdNesterov<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Self {
        SgdNesterov {
            momentum,
            velocity: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64, l2: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(shape_err!(
                "optimizer: {} grads / {} velocities for {} params",
                grads.len(),
                self.velocity.len(),
                params.len()
            ));
        }
        let (mu, lr, l2) = (T::of(self.momentum), T::of(lr), T::of(l2));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.tensor.numel() || v.len() != g.len() {
                return Err(shape_err!("optimizer: gradient size mismatch for {}", p.name));
            }
            let decay = p.weight_decay && l2 != T::zero();
            for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let gi = if decay { gi + l2 * *w } else { gi };
                *vi = mu * *vi - lr * gi;
                *w += mu * *vi - lr * gi;
            }
        }
        Ok(())
    }
}
