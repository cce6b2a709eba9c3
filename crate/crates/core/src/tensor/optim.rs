use super::{ParamKind, ParamStore};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Per-parameter `(first, second)` moments, indexed like the store.
    /// Empty vectors mark parameters never updated.
    pub fn moments(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.first.iter().zip(&self.second).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }

    /// One update of every trainable weight holding a gradient. Parameters
    /// without a gradient (unused this step) and frozen parameters are left
    /// untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::MissingGradients);
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            if m.is_empty() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            let decay = 1.0 - self.lr * self.weight_decay;
            for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x = *x * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn store_with(value: f64, grad: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::vector(vec![value]), ParamKind::Weight).unwrap();
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let loss = g.mul_scalar(p, grad);
        let loss = g.sum(loss);
        g.backward(loss).unwrap();
        s.absorb(&mut g);
        (s, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store_with(1.0, 0.5);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut s).unwrap();
        let expected = 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((s.get(id).tensor.data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).tensor.data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn decay_is_applied_to_the_value() {
        let (mut s, id) = store_with(2.0, 0.0);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut s).unwrap();
        // zero gradient: only the decoupled decay acts
        assert!((s.get(id).tensor.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let (mut s, id) = store_with(1.25, 0.0);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).tensor.data()[0], 1.25);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let (mut s, id) = store_with(0.3, 0.7);
        s.set_trainable("p", false);
        let before = s.get(id).tensor.data()[0].to_bits();
        let mut opt = AdamW::new(1e-2, 0.05);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).tensor.data()[0].to_bits(), before);
    }

    #[test]
    fn step_without_backward_is_rejected() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![1.0]), ParamKind::Weight).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGradients)));
        assert_eq!(opt.steps(), 0);
    }
}
