use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::ops::{self, Op};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward simply walks it in reverse. A graph is
/// built for one forward pass and consumed by one [`Graph::backward`].
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<ParamId, Var>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
    flops: Cell<u64>,
    strict: bool,
    first_non_finite: Cell<Option<&'static str>>,
    abs_margin: Cell<f64>,
    norm_margin: Cell<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New graph. Non-finite outputs abort immediately in debug builds.
    pub fn new() -> Self {
        Self::with_strict_finite(cfg!(debug_assertions))
    }

    /// With `strict` set, any op producing NaN/Inf returns
    /// [`Error::NonFinite`] naming the op. Otherwise the first offending op is
    /// only recorded (see [`Graph::first_non_finite`]).
    pub fn with_strict_finite(strict: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            grads: RefCell::new(None),
            flops: Cell::new(0),
            strict,
            first_non_finite: Cell::new(None),
            abs_margin: Cell::new(f64::INFINITY),
            norm_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add count of all ops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.get()
    }

    /// Smallest nonzero |input| seen by any `abs` node. Finite-difference checks use
    /// it to stay away from the kink.
    pub fn abs_margin(&self) -> f64 {
        self.abs_margin.get()
    }

    /// Smallest standard deviation of any group normalised by `layer_norm`
    /// over two or more elements. Normalisation bends sharply as this
    /// approaches zero, so finite-difference checks stay away from it too.
    pub fn norm_margin(&self) -> f64 {
        self.norm_margin.get()
    }

    pub(crate) fn note_norm_margin(&self, m: f64) {
        if m < self.norm_margin.get() {
            self.norm_margin.set(m);
        }
    }

    pub(crate) fn note_abs_margin(&self, m: f64) {
        if m < self.abs_margin.get() {
            self.abs_margin.set(m);
        }
    }

    pub(crate) fn add_flops(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf that receives a gradient on backward.
    pub fn input(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// that every use of a shared parameter accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            if self.first_non_finite.get().is_none() {
                self.first_non_finite.set(Some(name));
            }
            if self.strict {
                return Err(Error::NonFinite { op: name });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Propagates d`loss`/d(node) to every gradient-requiring node.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::State(
                "backward already ran on this graph; build a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            ops::backward(&nodes, id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, or `None` if
    /// `v` was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("gradient shape"))
    }

    /// Gradients of every parameter leaf created through [`Graph::param`],
    /// in parameter order. Parameters that the loss does not depend on get
    /// an all-zero gradient.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, Tensor)>> {
        if self.grads.borrow().is_none() {
            return Err(Error::State("param_grads before backward".into()));
        }
        Ok(self
            .params
            .borrow()
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).unwrap_or_else(|| Tensor::zeros(&self.shape(v)));
                (id, g)
            })
            .collect())
    }
}

/// Adds `src` into the gradient slot of `id`, creating it on first use.
pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, src: &[f64]) {
    match &mut grads[id] {
        Some(buf) => {
            for (b, s) in buf.iter_mut().zip(src) {
                *b += s;
            }
        }
        slot @ None => *slot = Some(src.to_vec()),
    }
}

/// Mutable gradient buffer for `id`, zero-initialised on first use.
pub(crate) fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_a_state_error() {
        let g = Graph::new();
        let x = g.input(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let g = Graph::new();
        let x = g.input(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let g = Graph::new();
        let data = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let x = g.input(data.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        for (gv, xv) in gx.data().iter().zip(data.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }

        let g = Graph::new();
        let x = g.input(data);
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shared_use_accumulates() {
        let g = Graph::new();
        let x = g.input(Tensor::full(&[2], 3.0));
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn strict_mode_names_the_failing_op() {
        let g = Graph::with_strict_finite(true);
        let x = g.constant(Tensor::full(&[1], 1000.0));
        match g.exp(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }

        let g = Graph::with_strict_finite(false);
        let x = g.constant(Tensor::full(&[1], 1000.0));
        let y = g.exp(x).unwrap();
        assert!(g.value(y).data()[0].is_infinite());
        assert_eq!(g.first_non_finite(), Some("exp"));
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::ones(&[2]));
        let x = g.input(Tensor::ones(&[2]));
        let y = g.mul(c, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }
}
