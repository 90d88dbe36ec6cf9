//! Reverse-mode gradient tape.
//!
//! Ops record themselves on their outputs during the forward pass (the
//! recording is append-only: a tensor's backward rule is fixed at creation
//! and never mutated). [`GradTape::record`] materializes the op sequence
//! reaching one root as a topological order; [`GradTape::backward`] replays
//! it in reverse, accumulating a gradient per tensor and mirroring leaf
//! gradients into their `grad` cells.

use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Recorded computation reaching a single root tensor.
pub struct GradTape {
    /// Topological order: every tensor appears after all of its inputs.
    order: Vec<Tensor>,
    root: Tensor,
    grads: HashMap<u64, Vec<f64>>,
}

impl GradTape {
    /// Capture the op sequence that produced `root`.
    pub fn record(root: &Tensor) -> GradTape {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // Iterative post-order walk; recursion would overflow on long
        // decode chains.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for input in &node.inputs {
                    stack.push((input.clone(), false));
                }
            }
        }
        GradTape { order, root: root.clone(), grads: HashMap::new() }
    }

    /// Number of recorded op applications (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.order.iter().filter(|t| t.node().is_some()).count()
    }

    /// Replay the tape in reverse from a scalar root. Each call recomputes
    /// the per-tensor gradients and adds them into leaf `grad` cells.
    pub fn backward(&mut self) -> Result<()> {
        if self.root.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be 1x1, got {}x{}",
                    self.root.rows(),
                    self.root.cols()
                ),
            ));
        }
        self.grads.clear();
        self.grads.insert(self.root.id(), vec![1.0]);
        for t in self.order.iter().rev() {
            let Some(node) = t.node() else { continue };
            let Some(upstream) = self.grads.get(&t.id()).cloned() else {
                continue;
            };
            let input_grads = (node.backward)(&upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}: arity", node.op);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(grad.len(), input.numel(), "{}: grad size", node.op);
                match self.grads.get_mut(&input.id()) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&grad) {
                            *a += b;
                        }
                    }
                    None => {
                        self.grads.insert(input.id(), grad);
                    }
                }
            }
        }
        for t in &self.order {
            if t.requires_grad() && t.is_leaf() {
                if let Some(g) = self.grads.get(&t.id()) {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    /// Gradient of the root with respect to `t`, if `t` participated.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Drop recorded state, keeping the tape reusable only via `record`.
    pub fn clear(&mut self) {
        self.order.clear();
        self.grads.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let a = Tensor::param_from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = ops::scale(&a, 2.0).unwrap();
        let mut tape = GradTape::record(&b);
        assert!(tape.backward().is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * x) => dy/dx = 2x, with x used twice by the same op.
        let x = Tensor::param_from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let y = ops::sum(&ops::mul(&x, &x).unwrap()).unwrap();
        let mut tape = GradTape::record(&y);
        tape.backward().unwrap();
        let g = tape.grad_of(&x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let a = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let y = ops::sum(&ops::mul(&a, &b).unwrap()).unwrap();
        assert!(!y.requires_grad());
        let tape = GradTape::record(&y);
        assert_eq!(tape.op_count(), 0);
    }

    #[test]
    fn op_count_reflects_recorded_ops() {
        let x = Tensor::param_from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let y = ops::sum(&ops::scale(&x, 3.0).unwrap()).unwrap();
        let tape = GradTape::record(&y);
        assert_eq!(tape.op_count(), 2);
    }

    #[test]
    fn grad_through_chain_matches_hand_derivative() {
        // y = mean(silu(2x)); hand-check at a single point.
        let x = Tensor::param_from_vec(1, 1, vec![0.7]).unwrap();
        let y = ops::mean(&ops::silu(&ops::scale(&x, 2.0).unwrap()).unwrap()).unwrap();
        let mut tape = GradTape::record(&y);
        tape.backward().unwrap();
        let g = tape.grad_of(&x).unwrap()[0];
        // d/dz silu(z) = sigma(z) (1 + z (1 - sigma(z))), z = 1.4, chain *2.
        let z: f64 = 1.4;
        let s = 1.0 / (1.0 + (-z).exp());
        let expect = 2.0 * s * (1.0 + z * (1.0 - s));
        assert!((g - expect).abs() < 1e-12);
    }
}
