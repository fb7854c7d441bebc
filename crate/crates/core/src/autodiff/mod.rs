//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes. Leaves hold values supplied
//! by the caller; every other node is produced by [`Tape::record`], which
//! runs a [`Function`]'s forward pass and remembers its inputs. Since a node
//! can only reference nodes that already exist, the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use qcnn_core::autodiff::Tape;
//! use qcnn_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
pub mod ops;

pub use check::{central_difference, gradient_check, max_relative_error};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable primitive: a forward map plus its vector-Jacobian product.
pub trait Function {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient per input. Entries whose `needs` flag is false may
    /// be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

struct Node {
    value: Tensor,
    function: Option<Box<dyn Function>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` if `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            function: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn record<F: Function + 'static>(&mut self, function: F, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.index >= self.nodes.len() {
                return Err(Error::contract(format!(
                    "{}: input node {} does not exist on this tape",
                    function.name(),
                    v.index
                )));
            }
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
            function.forward(&values)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            function: Some(Box::new(function)),
            inputs: inputs.iter().map(|v| v.index).collect(),
            requires_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
        })
    }

    /// Reverse accumulation from a scalar `loss`, visiting nodes in strictly
    /// decreasing index order so the summation order is fixed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = &self.nodes[loss.index].value;
        if !seed.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::filled(seed.shape(), 1.0));

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            let Some(function) = &node.function else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = function.backward(&inputs, &node.value, &grad_out, &needs)?;
            grads[idx] = Some(grad_out);
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                if g.len() != self.nodes[input].value.len() {
                    return Err(Error::contract(format!(
                        "{}: gradient has {} elements, input has {}",
                        function.name(),
                        g.len(),
                        self.nodes[input].value.len()
                    )));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
