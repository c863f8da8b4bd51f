use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Node<T>], &mut GradSink<'_, T>)>;

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: &'static str,
    backward: Option<BackwardFn<T>>,
}

/// Write access to input gradients while one node's backward runs.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Real> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulator of `v`, zero-initialized on first touch.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [T] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (s, &x) in self.slot(v).iter_mut().zip(g) {
            *s += x;
        }
    }
}

/// Append-only computation tape. Backward visits nodes in exact reverse
/// insertion order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: "leaf",
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. Non-finite outputs are rejected.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite output from {op}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.nodes[out.0].value.numel() != 1 {
            return Err(shape_err!("backward needs a scalar output, got {:?}", self.shape(out)));
        }
        self.backward_with(out, &Tensor::scalar(T::one()))
    }

    /// Backpropagates an arbitrary output adjoint `seed`.
    pub fn backward_with(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Interior adjoints are released once consumed; leaves keep theirs.
            let Some(g) = grads[i].take() else {
                continue;
            };
            let (before, _) = grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: before,
                nodes: &self.nodes,
            };
            backward(&g, &self.nodes, &mut sink);
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
