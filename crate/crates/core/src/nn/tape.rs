//! The recording tape and the backward walk.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

use super::params::{ParamId, ParamStore};
use super::Scalar;

/// One recorded operation. `backward` receives the output gradient, the
/// output value, parent values, per-parent need flags, and accumulates into
/// per-parent gradient slots (which may already hold partial sums).
pub(crate) trait Backward<F: Scalar> {
    fn backward(
        &self,
        grad: &ArrayD<F>,
        output: &ArrayD<F>,
        parents: &[&ArrayD<F>],
        parent_needs: &[bool],
        parent_grads: &mut [Option<ArrayD<F>>],
    );
}

pub(crate) struct Node<F: Scalar> {
    pub value: ArrayD<F>,
    pub parents: Vec<usize>,
    pub op: Option<Box<dyn Backward<F>>>,
    pub needs_grad: bool,
}

/// Records one forward pass; dropped after the optimizer step.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
}

/// Copyable handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that does not receive a gradient (inputs, masks, targets).
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, Vec::new(), None, false)
    }

    /// Leaf that accumulates a gradient (parameters).
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, Vec::new(), None, true)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        op: Option<Box<dyn Backward<F>>>,
        needs_grad: bool,
    ) -> Var<'_, F> {
        // Non-finite values are allowed to propagate; training loops watch
        // the loss and report divergence with the offending step instead.
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse walk from `root` (which must be scalar-shaped). Interior
    /// gradients are freed as soon as they are consumed; only nodes with
    /// `needs_grad` keep theirs in the returned container.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert!(std::ptr::eq(root.tape, self), "var from another tape");
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");

        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), F::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad && node.op.is_some() {
                grads[id] = None;
                continue;
            }
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[id].take() else { continue };

            let pvals: Vec<&ArrayD<F>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pneeds: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let mut pgrads: Vec<Option<ArrayD<F>>> =
                node.parents.iter().map(|&p| grads[p].take()).collect();
            op.backward(&grad, &node.value, &pvals, &pneeds, &mut pgrads);

            // Duplicate parents produce separate partials; merge on write-back.
            for (&p, g) in node.parents.iter().zip(pgrads) {
                if let Some(g) = g {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        slot @ None => *slot = Some(g),
                        Some(acc) => acc.zip_mut_with(&g, |a, &b| *a += b),
                    }
                }
            }
        }
        Gradients { grads }
    }

    pub fn value(&self, v: Var<'_, F>) -> ArrayD<F> {
        self.nodes.borrow()[v.id].value.clone()
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> ArrayD<F> {
        self.tape.value(*self)
    }

    /// The value as an `f64` scalar; panics unless the node is scalar-shaped.
    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        v.iter().next().unwrap().to_f64_lossy()
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&ArrayD<F>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }
}

/// Gradients for leaf nodes, keyed by tape position.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Per-step binding of a [`ParamStore`] to a tape: each parameter is copied
/// onto the tape as a leaf at most once per step.
pub struct Lease<'t, F: Scalar> {
    tape: &'t Tape<F>,
    vars: RefCell<Vec<Option<Var<'t, F>>>>,
}

impl<'t, F: Scalar> Lease<'t, F> {
    pub fn new(tape: &'t Tape<F>, store_len: usize) -> Self {
        Lease { tape, vars: RefCell::new(vec![None; store_len]) }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn var(&self, store: &ParamStore<F>, id: ParamId) -> Var<'t, F> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.index()] {
            return v;
        }
        let v = self.tape.leaf(store.value(id).clone());
        vars[id.index()] = Some(v);
        v
    }

    /// Drain `(param, grad)` pairs for every leased parameter that received
    /// a gradient, in parameter order.
    pub fn collect_grads(&self, grads: &mut Gradients<F>) -> Vec<(ParamId, ArrayD<F>)> {
        let vars = self.vars.borrow();
        let mut out = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.take(*v) {
                    out.push((ParamId::from_index(i), g));
                }
            }
        }
        out
    }
}
