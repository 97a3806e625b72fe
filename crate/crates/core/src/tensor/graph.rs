use std::collections::HashMap;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<T>)>;

struct Node<T> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Accumulates gradients for graph nodes during the backward sweep.
pub(crate) struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
    wants: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    /// Whether the node needs a gradient at all.
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Mutable access to the node's gradient buffer, zero-filled on first use.
    pub fn buf(&mut self, v: Var) -> &mut [T] {
        let len = self.lens[v.0];
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Hands over an owned buffer, avoiding a copy on first contribution.
    pub fn add_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// A define-by-run tape.
///
/// Every op appends a node holding its forward value and, when any input
/// requires a gradient, a closure that maps the output gradient onto the
/// inputs. Node order is a topological order, so the backward sweep simply
/// walks the nodes in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
    params: HashMap<ParamId, Var>,
    leaf_params: Vec<(Var, ParamId)>,
    matmul_flops: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
            leaf_params: Vec::new(),
            matmul_flops: 0,
        }
    }

    /// A graph that never records backward closures (inference).
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations spent in matrix products so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub(crate) fn count_matmul(&mut self, m: usize, k: usize, n: usize, batch: usize) {
        self.matmul_flops += 2 * (m * k * n * batch) as u64;
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(Arc::new(t.into_data()), shape, false)
    }

    /// An input whose gradient is wanted after `backward`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let rg = self.record;
        self.push_leaf(Arc::new(t.into_data()), shape, rg)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Brings a parameter onto the tape; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let rg = self.record && p.requires_grad;
        let v = self.push_leaf(p.value_arc(), p.shape().to_vec(), rg);
        self.params.insert(id, v);
        if rg {
            self.leaf_params.push((v, id));
        }
        v
    }

    fn push_leaf(&mut self, value: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result. `backward` is only kept when an input needs it.
    pub(crate) fn push_op(
        &mut self,
        value: Vec<T>,
        shape: Vec<usize>,
        inputs: &[Var],
        backward: impl FnOnce(&[T], &mut GradSink<T>) + 'static,
    ) -> Var {
        self.push_shared(Arc::new(value), shape, inputs, backward)
    }

    pub(crate) fn push_shared(
        &mut self,
        value: Arc<Vec<T>>,
        shape: Vec<usize>,
        inputs: &[Var],
        backward: impl FnOnce(&[T], &mut GradSink<T>) + 'static,
    ) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "op produced wrong length for {shape:?}");
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_arc(&self, v: Var) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on a node with {} elements", val.len());
        val[0]
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, None)
    }

    /// Reverse sweep seeded with an arbitrary output cotangent.
    pub fn backward_from(self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        self.backward_with(output, Some(seed))
    }

    fn backward_with(mut self, root: Var, seed: Option<Vec<T>>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        let len = self.nodes[root.0].value.len();
        let seed = match seed {
            Some(s) if s.len() == len => s,
            Some(s) => {
                return Err(Error::Usage(format!(
                    "backward seed has {} values, output has {len}",
                    s.len()
                )))
            }
            None if len == 1 => vec![T::one()],
            None => {
                return Err(Error::Usage(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    self.nodes[root.0].shape
                )))
            }
        };
        if !self.record {
            return Err(Error::Usage("backward on an inference graph".into()));
        }

        let n = root.0 + 1;
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            lens: self.nodes[..n].iter().map(|nd| nd.value.len()).collect(),
            wants: self.nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
        };
        let is_leaf: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.backward.is_none()).collect();
        sink.grads[root.0] = Some(seed);

        for i in (0..n).rev() {
            if is_leaf[i] {
                continue;
            }
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            if let Some(f) = self.nodes[i].backward.take() {
                f(&g, &mut sink);
            }
        }

        let mut leaves = HashMap::new();
        for (i, leaf) in is_leaf.iter().enumerate() {
            if *leaf && sink.wants[i] {
                if let Some(g) = sink.grads[i].take() {
                    leaves.insert(Var(i), g);
                }
            }
        }
        let params = self
            .leaf_params
            .iter()
            .filter(|(v, _)| v.0 < n)
            .filter_map(|(v, id)| leaves.get(v).map(|g| (*id, g.clone())))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Gradients of leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Vec<T>>,
    params: HashMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf var, `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    pub fn into_params(self) -> HashMap<ParamId, Vec<T>> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        let err = g.backward(x).unwrap_err();
        assert_eq!(err.category(), "usage");
    }

    #[test]
    fn backward_rejects_empty_tape() {
        let g = Graph::<f64>::new();
        assert!(g.backward(Var(0)).is_err());
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let data = [0.5, -1.5, 2.0, 3.25];
        let x = g.leaf(Tensor::from_f64(vec![4], &data).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.leaf(Tensor::zeros(vec![3]));
        assert!(!g.requires_grad(x));
        let s = g.sum(x);
        assert!(g.backward(s).is_err());
    }
}
