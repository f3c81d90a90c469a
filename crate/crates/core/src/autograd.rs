//! Reverse-mode differentiation over a recorded tape.
//!
//! Every differentiable operation appends one record holding its input and
//! output variable ids and a closure that maps output adjoints to input
//! adjoints. [`Tape::backward`] replays the records strictly in reverse.
//!
//! The tape is single-owner (`!Sync`); one training step builds one tape and
//! drops it after the gradients are extracted.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Maps output adjoints (zero-filled where no gradient arrived) and the
/// per-input "needs gradient" flags to input adjoints.
pub type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
}

struct OpRecord<T> {
    name: &'static str,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    backward: BackwardFn<T>,
}

pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    ops: RefCell<Vec<OpRecord<T>>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            ops: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates operations without recording adjoints.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (model parameter or probe).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, self.recording)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn op_count(&self) -> usize {
        self.ops.borrow().len()
    }

    /// Record an operation with precomputed outputs.
    ///
    /// The backward closure is dropped unless at least one input needs a
    /// gradient, so constant subgraphs cost nothing at backward time.
    pub fn record<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t, T>],
        outputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Vec<Var<'t, T>> {
        let requires_grad = self.recording && inputs.iter().any(|v| v.requires_grad());
        let out_vars: Vec<Var<'t, T>> = outputs
            .into_iter()
            .map(|t| self.push(t, requires_grad))
            .collect();
        if requires_grad {
            self.ops.borrow_mut().push(OpRecord {
                name,
                inputs: inputs.iter().map(|v| v.id).collect(),
                outputs: out_vars.iter().map(|v| v.id).collect(),
                backward,
            });
        }
        out_vars
    }

    pub(crate) fn record1<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t, T>],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        self.record(name, inputs, vec![output], backward)[0]
    }

    /// Adjoints of `loss` with respect to every variable that needs one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("backward: loss belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(loss_node.value.shape().to_vec()));

        for op in self.ops.borrow().iter().rev() {
            if op.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            let out_grads: Vec<Tensor<T>> = op
                .outputs
                .iter()
                .map(|&o| {
                    grads[o]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(nodes[o].value.shape().to_vec()))
                })
                .collect();
            let needs: Vec<bool> = op.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let in_grads = (op.backward)(&out_grads, &needs)?;
            if in_grads.len() != op.inputs.len() {
                return Err(Error::contract(format!(
                    "{}: backward produced {} adjoints for {} inputs",
                    op.name,
                    in_grads.len(),
                    op.inputs.len()
                )));
            }
            for ((&input, g), &need) in op.inputs.iter().zip(in_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != nodes[input].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "{} returned adjoint {:?} for input {:?}",
                            op.name,
                            g.shape(),
                            nodes[input].value.shape()
                        ),
                    ));
                }
                grads[input] = Some(match grads[input].take() {
                    None => g,
                    Some(acc) => acc.zip_map(&g, |a, b| a + b)?,
                });
            }
        }

        // every differentiable variable gets an adjoint, zero if unreachable
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match g {
                Some(g) => Some(g),
                None if n.requires_grad => Some(Tensor::zeros(n.value.shape().to_vec())),
                None => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `var`, which must have been created with [`Tape::leaf`]
    /// (or derived from one).
    pub fn wrt(&self, var: Var<'_, T>) -> Result<Tensor<T>> {
        self.get(var)
            .cloned()
            .ok_or_else(|| Error::contract(format!("no gradient recorded for {var:?}")))
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
