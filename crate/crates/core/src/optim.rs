//! Bias-corrected Adam with moments stored on each parameter.

use crate::error::{Error, Result};
use crate::params::{Parameter, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken so far.
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Applies one update to every parameter; `grads` follows store order.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        for (p, g) in store.iter_mut().zip(grads) {
            adam_update(p, g, self.t, self.lr, self.beta1, self.beta2, self.eps);
        }
        Ok(())
    }
}

/// Standard Adam update at step `t ≥ 1`, in place.
pub fn adam_update<T: Scalar>(p: &mut Parameter<T>, grad: &Tensor<T>, t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    let values = p.value.data_mut();
    let m = p.adam_m.data_mut();
    let v = p.adam_v.data_mut();
    for i in 0..values.len() {
        let g = grad.data()[i].as_f64();
        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * g;
        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        values[i] = T::of(values[i].as_f64() - step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_is_lr() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut store, &[Tensor::from_f64(&[1], &[1.0]).unwrap()]).unwrap();
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut store = scalar_store(0.7);
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            opt.step(&mut store, &[Tensor::from_f64(&[1], &[0.0]).unwrap()]).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(1e-2);
        let g = [Tensor::from_f64(&[1], &[-3.0]).unwrap()];
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            opt.step(&mut store, &g).unwrap();
            let w = store.iter().next().unwrap().value.data()[0];
            last_step = w - prev;
            prev = w;
        }
        assert!((last_step - 1e-2).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(1e-3);
        assert!(opt.step(&mut store, &[]).is_err());
        assert!(opt
            .step(&mut store, &[Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()])
            .is_err());
        assert_eq!(opt.t, 0);
    }
}
