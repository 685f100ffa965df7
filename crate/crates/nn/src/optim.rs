use serde::{Deserialize, Serialize};

use crate::{Matrix, ParamStore};

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// Plain gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(store.len(), grads.len());
        for ((_, p), g) in store.iter_mut().zip(grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * d;
            }
        }
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(store.len(), grads.len());
        assert_eq!(store.len(), self.m.len(), "optimizer built for a different store");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, ((_, p), g)) in store.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let mut opt = Adam::new(0.1, &store);
        opt.step(&mut store, &[Matrix::row_vector(&[3.0, -0.2, 0.0])]);
        let w = store.by_name("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 1.9).abs() < 1e-6);
        assert_eq!(w.get(0, 2), 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::row_vector(&[1.0, 2.0]));
        let before = store.clone();
        Adam::new(0.0, &store).step(&mut store, &[Matrix::row_vector(&[5.0, -5.0])]);
        Sgd::new(0.0).step(&mut store, &[Matrix::row_vector(&[5.0, -5.0])]);
        assert_eq!(store, before);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0]), Matrix::row_vector(&[0.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().map(Matrix::squared_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
