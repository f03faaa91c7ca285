//! Reverse-mode autodiff over a define-by-run operation graph.
//!
//! Every operation returns a new [`Tensor`] node holding its value and, when
//! any input requires a gradient, a backward closure plus handles to its
//! inputs. [`Tensor::backward`] walks the graph in reverse topological order.
//! Only leaves created with `requires_grad` keep gradients after the pass;
//! intermediate gradients live in a scratch map and are dropped.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real};

pub(crate) type BackwardFn = Box<dyn Fn(&NdArray) -> Vec<Option<NdArray>>>;

struct Node {
    value: RefCell<NdArray>,
    grad: RefCell<Option<NdArray>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Differentiable tensor handle. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("value", &*self.0.value.borrow())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(value: NdArray) -> Self {
        Self::leaf(value, false)
    }

    /// Trainable leaf: gradients accumulate here on `backward`.
    pub fn parameter(value: NdArray) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: NdArray, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Records the result of an operation. The backward closure is dropped
    /// when no parent needs a gradient.
    pub(crate) fn from_op(value: NdArray, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Tensor(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn value(&self) -> Ref<'_, NdArray> {
        self.0.value.borrow()
    }

    /// Mutable access to a leaf's value (optimizer updates, checkpoint load).
    pub fn value_mut(&self) -> Result<RefMut<'_, NdArray>> {
        if self.0.backward.is_some() {
            return Err(Error::Contract(
                "cannot mutate the value of a non-leaf tensor".into(),
            ));
        }
        Ok(self.0.value.borrow_mut())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn grad(&self) -> Option<Ref<'_, NdArray>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<NdArray> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value().clone())
    }

    pub fn item(&self) -> Result<Real> {
        self.value().item()
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from a single-element tensor, accumulating
    /// `d self / d leaf` into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Node, NdArray> = HashMap::new();
        let seed = NdArray::full(self.shape(), 1.0);
        grads.insert(self.key(), seed);

        for node in order.iter().rev() {
            let Some(grad_out) = grads.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.0.requires_grad {
                        let mut slot = node.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.add_assign(&grad_out)?,
                            None => *slot = Some(grad_out),
                        }
                    }
                }
                Some(backward) => {
                    let parent_grads = backward(&grad_out);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.add_assign(&g)?,
                            None => {
                                grads.insert(parent.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over grad-requiring nodes; iterative to survive deep graphs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key(), ());
        while let Some((node, next_child)) = stack.pop() {
            if next_child < node.0.parents.len() {
                let child = node.0.parents[next_child].clone();
                stack.push((node, next_child + 1));
                if child.requires_grad() && !visited.contains_key(&child.key()) {
                    visited.insert(child.key(), ());
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let x = Tensor::parameter(NdArray::zeros(vec![2, 2]));
        let y = ops::sigmoid(&x);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::parameter(NdArray::from_fn(vec![2, 3, 4], |i| i as Real * 0.1));
        ops::sum(&x).backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.shape(), &[2, 3, 4]);
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor::parameter(NdArray::full(vec![3], 2.0));
        ops::sum(&x).backward().unwrap();
        ops::sum(&x).backward().unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&v| v == 2.0));
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        let x = Tensor::parameter(NdArray::full(vec![1], 3.0));
        let y = ops::mul(&x, &x).unwrap();
        ops::sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap().data()[0], 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let c = Tensor::constant(NdArray::full(vec![2], 1.0));
        let p = Tensor::parameter(NdArray::full(vec![2], 1.0));
        ops::sum(&ops::mul(&c, &p).unwrap()).backward().unwrap();
        assert!(c.grad().is_none());
        assert!(p.grad().is_some());
    }

    #[test]
    fn non_leaf_value_is_immutable() {
        let p = Tensor::parameter(NdArray::full(vec![2], 1.0));
        let y = ops::sigmoid(&p);
        assert!(y.value_mut().is_err());
        assert!(p.value_mut().is_ok());
    }
}
