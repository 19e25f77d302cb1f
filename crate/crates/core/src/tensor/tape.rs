use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the output gradient, the parents' values and
/// which parents actually need a gradient.
pub(crate) struct GradCtx<'a, S> {
    pub grad: &'a [S],
    pub inputs: Vec<&'a Tensor<S>>,
    pub needs: Vec<bool>,
}

impl<S> GradCtx<'_, S> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn<S> = Box<dyn FnOnce(&GradCtx<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    grad: Option<Vec<S>>,
}

/// Topological record of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order. Backward closures are consumed by
/// [`Tape::backward`]; values and gradients stay readable until the tape drops.
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    /// Records an op output. The backward closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push(&mut self, value: Tensor<S>, parents: &[Var], backward: BackwardFn<S>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(backward) = self.nodes[i].backward.take() {
                let node = &self.nodes[i];
                let ctx = GradCtx {
                    grad: &g,
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                };
                let contributions = backward(&ctx);
                debug_assert_eq!(contributions.len(), node.parents.len());
                let parents = node.parents.clone();
                for (p, contrib) in parents.into_iter().zip(contributions) {
                    let Some(contrib) = contrib else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), self.nodes[p].value.len());
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}
