use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records operations in execution order for a single reverse pass.
///
/// A tape is single-threaded and meant to be short-lived: build one per
/// forward pass, call [`Tape::backward`] once, then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    // Node count at the last backward call; a second call with no new
    // recordings in between is rejected.
    consumed_at: Cell<Option<usize>>,
    fault: Cell<bool>,
    branches: RefCell<Branches>,
}

/// Piecewise decisions (relu signs, threshold masks, skip flags) taken
/// during one forward pass, in the order they were made.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchLog(Vec<Vec<bool>>);

#[derive(Default)]
enum Branches {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay { log: Vec<Vec<bool>>, next: usize, differing: usize },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a tensor that accumulates gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    /// Records a tensor that never accumulates gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: perturbs convolution weight gradients so that gradient
    /// checks can be shown to detect a broken backward pass.
    #[doc(hidden)]
    pub fn inject_backward_fault(&self) {
        self.fault.set(true);
    }

    /// Starts logging every piecewise decision made on this tape.
    #[doc(hidden)]
    pub fn record_branches(&self) {
        *self.branches.borrow_mut() = Branches::Record(Vec::new());
    }

    /// The decisions logged since [`Tape::record_branches`].
    #[doc(hidden)]
    pub fn branch_log(&self) -> BranchLog {
        match &*self.branches.borrow() {
            Branches::Record(log) => BranchLog(log.clone()),
            _ => BranchLog::default(),
        }
    }

    /// Makes later decisions follow `log` instead of the values computed on
    /// this tape, so that a perturbed forward pass stays on the same smooth
    /// piece of a piecewise function.
    #[doc(hidden)]
    pub fn replay_branches(&self, log: BranchLog) {
        *self.branches.borrow_mut() = Branches::Replay { log: log.0, next: 0, differing: 0 };
    }

    /// Decision points where replay overrode a different local outcome.
    #[doc(hidden)]
    pub fn overridden_branches(&self) -> usize {
        match &*self.branches.borrow() {
            Branches::Replay { differing, .. } => *differing,
            _ => 0,
        }
    }

    pub(crate) fn branching(&self) -> bool {
        !matches!(*self.branches.borrow(), Branches::Off)
    }

    /// Passes a decision through the record/replay machinery.
    pub(crate) fn branch(&self, local: Vec<bool>) -> Vec<bool> {
        match &mut *self.branches.borrow_mut() {
            Branches::Off => local,
            Branches::Record(log) => {
                log.push(local.clone());
                local
            }
            Branches::Replay { log, next, differing } => {
                let fixed = log.get(*next).filter(|f| f.len() == local.len()).cloned();
                let fixed = fixed.expect("replayed forward pass diverged from the recorded one");
                *next += 1;
                if fixed != local {
                    *differing += 1;
                }
                fixed
            }
        }
    }

    pub(crate) fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them, visiting nodes in exact reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("backward: loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if self.consumed_at.get() == Some(nodes.len()) {
            return Err(Error::State(
                "backward already ran on this tape; record a new graph first".into(),
            ));
        }
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed_at.set(Some(nodes.len()));

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let wants = |i: usize| nodes[i].requires_grad;
            for (input, gin) in node.op.backward(&nodes, &node.value, &g, &wants, fault) {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gin),
                }
            }
            // Keep the gradient of leaves; drop intermediates as we go.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item().expect("item() on non-scalar variable")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// Gradients produced by one backward pass, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when nothing reached it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
