//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]: its value,
//! the ids of its inputs, and a closure mapping the output gradient to input
//! gradients. Node ids are creation indices, so the tape is acyclic and
//! already topologically sorted; [`Tape::backward`] sweeps it once in
//! reverse. A tape lives for one forward/backward pass and is then dropped.

mod ops;

pub use ops::Activation;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule receives.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields nothing useful.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Appends an operation node. The rule is kept only if some parent
    /// requires a gradient.
    pub fn record<F>(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], rule: F) -> Var
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(rule)) } else { None },
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Whether a rule for an op over `parents` would be kept. Ops use this to
    /// avoid saving context that nobody will read.
    pub fn will_record(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// where a node feeds several consumers.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(grad) = upper[0].as_ref() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = rule(&BackwardArgs {
                grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "rule arity ({})", node.op);
            for ((p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[p.0].value.shape(),
                    "gradient shape from {}",
                    node.op
                );
                match &mut lower[p.0] {
                    Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
