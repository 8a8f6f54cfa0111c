//! Append-only computation tape for reverse-mode differentiation.
//!
//! Every primitive op evaluates eagerly and appends one node holding its
//! output value, its input node ids and a backward rule. Since inputs always
//! precede outputs, append order is a topological order and `backward` is a
//! single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the upstream gradient, the input values and the output value to one
/// optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// A single-threaded recording of primitive operations.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A recorded node as seen from outside: op name, input node ids and value.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub value: Tensor,
}

/// A tensor bound to a tape.
///
/// `requires_grad` is true for leaves registered with [`Tape::leaf`] and for
/// anything computed from them; constants and values derived only from
/// constants carry no backward rule.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Tensor,
    requires_grad: bool,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("value", &self.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies of every recorded node in recording order. Node ids index
    /// into the result.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| TraceEntry {
                op: n.op,
                inputs: n.inputs.clone(),
                value: n.value.clone(),
            })
            .collect()
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.input(value, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.input(value, false)
    }

    fn input(&self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.push(Node {
            op: if requires_grad { "leaf" } else { "constant" },
            value: value.clone(),
            inputs: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
        });
        Var {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Appends the result of a primitive op. The backward rule is dropped when
    /// no input requires a gradient.
    pub(crate) fn record(
        op: &'static str,
        inputs: &[&Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        let tape = inputs
            .first()
            .map(|v| v.tape.clone())
            .ok_or_else(|| Error::Backward(format!("{op}: recorded with no inputs")))?;
        if inputs.iter().any(|v| !v.tape.same(&tape)) {
            return Err(Error::Backward(format!("{op}: inputs live on different tapes")));
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let id = tape.push(Node {
            op,
            value: value.clone(),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            is_leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            tape,
            id,
            value,
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if !root.tape.same(self) {
            return Err(Error::Backward("root is not on this tape".into()));
        }
        if root.value.len() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_values: Vec<&Tensor> =
                node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let input_grads = rule(&upstream, &input_values, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    grad.shape(),
                    nodes[input].value.shape(),
                    "gradient shape from {}",
                    node.op
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }

        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                let grad = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(id, grad);
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of every differentiable leaf on a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; `None` only if `var` is not a differentiable leaf.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.leaves.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self)
    }

    /// Wraps a value computed outside the tape as a constant on the same tape.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.tape.constant(value)
    }
}
