use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

type BackwardRule<S> = Box<dyn Fn(&[S]) -> Vec<Option<Vec<S>>>>;

/// Backward record of one op: the inputs it read and a rule mapping the
/// output gradient to one optional gradient per input.
pub struct GradFn<S: Scalar> {
    inputs: Vec<Tensor<S>>,
    rule: BackwardRule<S>,
}

impl<S: Scalar> GradFn<S> {
    pub(crate) fn new(
        inputs: Vec<Tensor<S>>,
        rule: impl Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Self {
        Self {
            inputs,
            rule: Box::new(rule),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Non-leaf nodes reachable from `self`, in topological order (inputs
    /// before the ops that consume them).
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            let Some(gf) = t.node().grad_fn.as_ref() else {
                continue;
            };
            stack.push((t.clone(), true));
            for inp in gf.inputs.iter().rev() {
                if inp.requires_grad() && !seen.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }
        order
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// leaf that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Autograd(
                "loss does not depend on any tensor requiring grad".into(),
            ));
        }
        if self.is_leaf() {
            self.accumulate_grad(&[S::one()]);
            return Ok(());
        }
        let order = self.topo_order();
        if order.iter().any(|t| t.node().consumed.get()) {
            return Err(Error::Autograd(
                "backward called twice on the same graph without reset".into(),
            ));
        }
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.id(), vec![S::one()]);
        for t in order.iter().rev() {
            t.node().consumed.set(true);
            let Some(g_out) = grads.remove(&t.id()) else {
                continue;
            };
            let gf = t.node().grad_fn.as_ref().expect("topo order holds non-leaves");
            let g_in = (gf.rule)(&g_out);
            debug_assert_eq!(g_in.len(), gf.inputs.len());
            for (inp, g) in gf.inputs.iter().zip(g_in) {
                let Some(g) = g else { continue };
                if !inp.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), inp.numel());
                if inp.is_leaf() {
                    inp.accumulate_grad(&g);
                } else {
                    match grads.get_mut(&inp.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            grads.insert(inp.id(), g);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Clears the consumed marks so the graph may be swept again.
    pub fn reset_graph(&self) {
        for t in self.topo_order() {
            t.node().consumed.set(false);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn second_backward_needs_reset() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(loss.backward().is_err());
        loss.reset_graph();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: loss = sum(y + y) -> grad 4x
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        y.add(&y).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }
}
