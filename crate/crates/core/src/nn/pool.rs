//! 2×2 max pooling.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const WINDOW: usize = 2;

/// Returns pooled values and, per output, the flat input index of the
/// block maximum (first occurrence in row-major block order on ties).
fn pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("maxpool2d", format!("expected (N,C,H,W), got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % WINDOW != 0 || w % WINDOW != 0 {
        return Err(Error::invalid("maxpool2d", format!("spatial size {h}x{w} is not even")));
    }
    let (ho, wo) = (h / WINDOW, w / WINDOW);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (oy * WINDOW) * w + ox * WINDOW;
                for dy in 0..WINDOW {
                    for dx in 0..WINDOW {
                        let idx = base + (oy * WINDOW + dy) * w + ox * WINDOW + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pool(x).map(|(t, _)| t)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn maxpool2d(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (out, arg) = pool(&x)?;
        self.tape().note_branch(&arg);
        let in_shape = x.shape().to_vec();
        let numel = x.numel();
        Ok(self.tape().op(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); numel];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn block_max() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 6], 2.5).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn odd_size_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(maxpool2d(&x).is_err());
    }

    #[test]
    fn tie_routes_to_first() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[1, 1, 2, 2], 1.0).unwrap());
        let g = tape.backward(x.maxpool2d().unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
