//! Layer normalization over the last axis.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: f64,
}

struct Stats<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn check(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<usize> {
    let c = *x
        .last()
        .ok_or_else(|| Error::invalid("layer_norm", "input must have at least one axis"))?;
    if gamma != [c] || beta != [c] {
        return Err(Error::shape("layer_norm", x, gamma));
    }
    Ok(c)
}

fn normalize<T: Scalar>(x: &[T], c: usize, eps: f64) -> Stats<T> {
    let rows = x.len() / c;
    let n = T::of(c as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.chunks(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + T::of(eps)).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * is));
        inv_std.push(is);
    }
    Stats { xhat, inv_std }
}

fn affine<T: Scalar>(xhat: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let c = gamma.len();
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks(c) {
        out.extend(row.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| v * g + b));
    }
    out
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let c = check(x.shape(), p.gamma.shape(), p.beta.shape())?;
    let st = normalize(x.data(), c, p.epsilon);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        affine(&st.xhat, p.gamma.data(), p.beta.data()),
    ))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let c = check(x.shape(), gv.shape(), bv.shape())?;
        let st = normalize(x.data(), c, eps);
        let out = Tensor::from_parts(x.shape().to_vec(), affine(&st.xhat, gv.data(), bv.data()));
        let shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let n = T::of(c as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = need[0].then(|| Vec::with_capacity(gd.len()));
            let mut dxhat = vec![T::zero(); c];
            for ((grow, xrow), &is) in gd.chunks(c).zip(st.xhat.chunks(c)).zip(&st.inv_std) {
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for j in 0..c {
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                    dxhat[j] = grow[j] * gv.data()[j];
                    sum_d += dxhat[j];
                    sum_dx += dxhat[j] * xrow[j];
                }
                if let Some(dx) = dx.as_mut() {
                    dx.extend((0..c).map(|j| is / n * (n * dxhat[j] - sum_d - xrow[j] * sum_dx)));
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(shape.clone(), d)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: usize, g: f64, b: f64, eps: f64) -> LayerNormParams<f64> {
        LayerNormParams {
            gamma: Tensor::full(&[c], g).unwrap(),
            beta: Tensor::full(&[c], b).unwrap(),
            epsilon: eps,
        }
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let x = Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap();
        let y = layer_norm(&x, &params(3, 1.0, 0.0, DEFAULT_EPS)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_row() {
        let x = Tensor::from_f64(&[2], &[-1.0, 1.0]).unwrap();
        let y = layer_norm(&x, &params(2, 1.0, 0.0, 1e-14)).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_override() {
        let x = Tensor::from_f64(&[2, 3], &[1.0, -4.0, 2.0, 0.5, 9.0, 3.0]).unwrap();
        let y = layer_norm(&x, &params(3, 0.0, 7.0, DEFAULT_EPS)).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn width_mismatch() {
        let x = Tensor::from_f64(&[2, 3], &[0.0; 6]).unwrap();
        assert!(layer_norm(&x, &params(2, 1.0, 0.0, DEFAULT_EPS)).is_err());
    }
}
