use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations
/// return `None` for the inputs they were not asked about.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Entry<T> {
    value: Tensor<T>,
    requires_grad: bool,
    leaf: bool,
}

struct Node<T> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Var>,
    output: Var,
}

/// Single-writer recording of a forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// valid topological order and the reverse sweep needs no sorting.
pub struct Tape<T: Scalar> {
    entries: Vec<Entry<T>>,
    nodes: Vec<Node<T>>,
    check_finite: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape; non-finite checks follow `debug_assertions`.
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            backward_done: false,
        }
    }

    /// Enables or disables the per-operation NaN/Inf check.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, true)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, true)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, leaf: bool) -> Var {
        self.entries.push(Entry {
            value,
            requires_grad,
            leaf,
        });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.entries[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.entries[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.entries[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of recorded differentiable operations.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Appends the result of an operation. Nothing is kept for backward when
    /// no input requires a gradient.
    pub fn record(&mut self, op: impl Backward<T> + 'static, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        if self.check_finite && !output.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        let out = self.push(output, requires_grad, false);
        if requires_grad {
            self.nodes.push(Node {
                op: Box::new(op),
                inputs: inputs.to_vec(),
                output: out,
            });
        }
        Ok(out)
    }

    /// Allows [`Tape::backward`] to run again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Gradients are retained for every
    /// trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.entries.len()];
        if self.entries[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }
        for node in self.nodes.iter().rev() {
            let Some(grad) = grads[node.output.0].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.entries[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.entries[v.0].value).collect();
            let input_grads = node
                .op
                .backward(&inputs, &self.entries[node.output.0].value, &grad, &needs)?;
            for ((var, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(g)) = (*need, g) else {
                    continue;
                };
                if g.shape() != self.entries[var.0].value.shape() {
                    return Err(Error::Dimension {
                        op: node.op.name(),
                        left: g.shape(),
                        right: self.entries[var.0].value.shape(),
                    });
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.backward_done = true;
        // Intermediate gradients were consumed above; only leaves remain.
        for (entry, g) in self.entries.iter().zip(grads.iter_mut()) {
            if !(entry.leaf && entry.requires_grad) {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(entry.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of trainable leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        self.grads
            .get(var.0)
            .and_then(Option::as_ref)
            .ok_or(Error::AbsentGradient(var.0))
    }

    pub fn take(&mut self, var: Var) -> Result<Tensor<T>> {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .ok_or(Error::AbsentGradient(var.0))
    }
}
