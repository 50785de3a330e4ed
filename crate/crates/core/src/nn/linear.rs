use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `x·W + b` over the last axis on plain tensors. `W` is `(D_in, D_out)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, d_in, d_out) = dims(x.shape(), w.shape())?;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().expect("checked rank") = d_out;
    let mut y = x.reshape(&[rows, d_in])?.matmul(w)?;
    if let Some(b) = b {
        y = y.add(b)?;
    }
    y.reshape(&out_shape)
}

fn dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let d_in = *x
        .last()
        .ok_or_else(|| Error::invalid("linear", "input must have at least one axis"))?;
    if w.len() != 2 || w[0] != d_in {
        return Err(Error::shape("linear", x, w));
    }
    Ok((x.iter().product::<usize>() / d_in, d_in, w[1]))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (rows, d_in, d_out) = dims(&shape, &weight.shape())?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("checked rank") = d_out;
        let mut y = self.reshape(&[rows, d_in])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        y.reshape(&out_shape)
    }
}
