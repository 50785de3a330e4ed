use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autograd::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)`.
    Gelu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::Gelu => x.map(gelu),
            Activation::Sigmoid => x.map(sigmoid),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn activation(self, kind: Activation) -> Var<'t, T> {
        let x = self.value();
        let y = kind.apply(&x);
        let y_saved = (kind == Activation::Sigmoid).then(|| y.clone());
        if kind == Activation::Relu && self.tape().tracks_branches() {
            self.tape()
                .note_branch(x.data().iter().map(|&v| v > T::zero()).collect::<Vec<_>>());
        }
        self.tape().op(y, &[self], move |g, _| {
            let d: Vec<T> = match kind {
                Activation::Relu => g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
                Activation::Gelu => g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect(),
                Activation::Sigmoid => g
                    .data()
                    .iter()
                    .zip(y_saved.as_ref().expect("saved for sigmoid").data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect(),
            };
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.activation(Activation::Sigmoid)
    }
}
