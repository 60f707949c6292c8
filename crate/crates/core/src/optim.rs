//! Heavy-ball SGD.

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One classic momentum update in place:
/// `v ← momentum·v + g`, then `w ← w − lr·v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// Momentum SGD over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        let velocity = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        SgdMomentum { momentum, velocity }
    }

    /// Applies the update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).data().to_vec();
            sgd_momentum_step(
                store.value_mut(id).data_mut(),
                &grad,
                self.velocity[id.index()].data_mut(),
                lr,
                self.momentum,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut w, &[0.5, 1.0], &mut v, 0.1, 0.0);
        assert_eq!(w, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = vec![3.0, 4.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9);
        assert_eq!(w, vec![3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, v2 = 1.9; w = -0.1 - 0.19
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9);
        assert!((w[0] + 0.29).abs() < 1e-15);
        assert!((v[0] - 1.9).abs() < 1e-15);
    }
}
