//! Equal-weight binary cross-entropy plus soft Dice on logits.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Additive smoothing in the soft Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    BceDice,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::BceDice => f.write_str("bce_dice"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce_dice" => Ok(LossKind::BceDice),
            _ => Err(Error::Config(format!("unknown loss kind `{s}`"))),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(logits: &[usize], target: &[usize]) -> Result<(usize, usize)> {
    if logits != target {
        return Err(Error::shape("bce_dice_loss", logits, target));
    }
    if logits.is_empty() || logits[0] == 0 {
        return Err(Error::invalid("bce_dice_loss", format!("needs a batch axis, got {logits:?}")));
    }
    let n = logits[0];
    Ok((n, logits.iter().product::<usize>() / n))
}

/// Neumaier-compensated running sum; the loss reduces thousands of terms.
#[derive(Default, Clone, Copy)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

struct Parts {
    value: f64,
    grad: Vec<f64>,
}

/// Loss value and its gradient with respect to the logits.
///
/// BCE is averaged over every element; Dice is computed per image and
/// averaged over the batch.
fn evaluate<T: Scalar>(z: &[T], t: &[T], n: usize, per: usize) -> Parts {
    let total = (n * per) as f64;
    let mut bce = Compensated::default();
    let mut grad = vec![0.0; z.len()];
    let mut dice_sum = 0.0;
    for b in 0..n {
        let range = b * per..(b + 1) * per;
        let (mut sp, mut st, mut spt) = (Compensated::default(), 0.0, Compensated::default());
        for i in range.clone() {
            let (zi, ti) = (z[i].as_f64(), t[i].as_f64());
            let p = sigmoid(zi);
            bce.add(zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p());
            grad[i] = 0.5 * (p - ti) / total;
            sp.add(p);
            st += ti;
            spt.add(p * ti);
        }
        let num = 2.0 * spt.value() + DICE_SMOOTH;
        let den = sp.value() + st + DICE_SMOOTH;
        dice_sum += num / den;
        for i in range {
            let p = sigmoid(z[i].as_f64());
            let d_dice_dp = (2.0 * t[i].as_f64() * den - num) / (den * den);
            grad[i] -= 0.5 / n as f64 * d_dice_dp * p * (1.0 - p);
        }
    }
    Parts {
        value: 0.5 * bce.value() / total + 0.5 * (1.0 - dice_sum / n as f64),
        grad,
    }
}

/// `0.5·BCE(σ(logits), target) + 0.5·(1 − softDice)` as a plain value.
pub fn bce_dice_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let (n, per) = check(logits.shape(), target.shape())?;
    Ok(evaluate(logits.data(), target.data(), n, per).value)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Scalar loss node; the target is treated as a constant.
    pub fn bce_dice_loss(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let z = self.value();
        let (n, per) = check(z.shape(), target.shape())?;
        let parts = evaluate(z.data(), target.data(), n, per);
        let shape = z.shape().to_vec();
        let grad: Vec<T> = parts.grad.into_iter().map(T::of).collect();
        Ok(self.tape().op(Tensor::scalar(T::of(parts.value)), &[self], move |g, _| {
            let scale = g.data()[0];
            vec![Some(Tensor::from_parts(
                shape.clone(),
                grad.iter().map(|&v| v * scale).collect(),
            ))]
        }))
    }
}
