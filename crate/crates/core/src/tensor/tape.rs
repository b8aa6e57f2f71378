use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Maps the gradient of a node's output to gradients of its parents, in
/// parent order. `None` means "no contribution".
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    is_leaf: bool,
}

/// Ordered record of executed operations.
///
/// Operations are appended in execution order; [`Tape::backward`] walks them
/// in exact reverse order and can run once per tape.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{})", self.id)
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Grad-enabled leaf (a parameter or an input being differentiated).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            is_leaf: true,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Record an operation. The backward closure is dropped when no parent
    /// needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: &[Var<'_, F>],
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let requires_grad = parents.iter().any(|p| self.requires_grad(p.id));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            is_leaf: false,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Whether any of `vars` participates in differentiation; ops use this to
    /// skip saving intermediates.
    pub(crate) fn any_requires_grad(&self, vars: &[Var<'_, F>]) -> bool {
        vars.iter().any(|v| self.requires_grad(v.id))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVariable);
        }
        let loss_shape = self.nodes.borrow()[loss.id].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            if node.is_leaf {
                grads[id] = Some(grad);
                continue;
            }
            let Some(backward) = node.backward.take() else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let parents = node.parents.clone();
            for (pid, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a = *a + *g;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.insert(id, g);
            }
        }
        Ok(Gradients { grads: out })
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }
}

/// Gradients of every grad-enabled leaf, keyed by the leaf's tape position.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: BTreeMap<usize, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: &Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
