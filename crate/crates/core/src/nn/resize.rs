//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per output index: (low source index, high source index, low weight, high weight).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

/// Source coordinate `s = (d + 0.5)·in/out − 0.5`, clamped to `[0, in−1]`.
pub(crate) fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            let frac = s - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

fn check(x: &[usize], out_h: usize, out_w: usize) -> Result<()> {
    if x.len() != 4 {
        return Err(Error::invalid("bilinear", format!("expected (N,C,H,W), got {x:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear", "output size must be positive"));
    }
    Ok(())
}

fn resize_planes<T: Scalar>(src: &[T], planes: usize, h: usize, w: usize, ty: &[Tap], tx: &[Tap]) -> Vec<T> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in ty {
            let (wy0, wy1) = (T::of(y.w_lo), T::of(y.w_hi));
            let (r0, r1) = (&plane[y.lo * w..(y.lo + 1) * w], &plane[y.hi * w..(y.hi + 1) * w]);
            for x in tx {
                let (wx0, wx1) = (T::of(x.w_lo), T::of(x.w_hi));
                let top = wx0 * r0[x.lo] + wx1 * r0[x.hi];
                let bot = wx0 * r1[x.lo] + wx1 * r1[x.hi];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    out
}

/// Bilinear resize of an `(N,C,H,W)` tensor to `(N,C,out_h,out_w)`.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check(x.shape(), out_h, out_w)?;
    let s = x.shape();
    let (ty, tx) = (taps(s[2], out_h), taps(s[3], out_w));
    let data = resize_planes(x.data(), s[0] * s[1], s[2], s[3], &ty, &tx);
    Ok(Tensor::from_parts(vec![s[0], s[1], out_h, out_w], data))
}

/// ×2 bilinear upsampling.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check(x.shape(), 1, 1)?;
    resize_bilinear(x, x.shape()[2] * 2, x.shape()[3] * 2)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = resize_bilinear(&x, out_h, out_w)?;
        let s = x.shape().to_vec();
        let (ty, tx) = (taps(s[2], out_h), taps(s[3], out_w));
        Ok(self.tape().op(out, &[self], move |g, _| {
            let (h, w) = (s[2], s[3]);
            let mut dx = vec![T::zero(); s.iter().product()];
            let gd = g.data();
            for p in 0..s[0] * s[1] {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                let gp = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, y) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of(y.w_lo), T::of(y.w_hi));
                    for (ox, xt) in tx.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        let (wx0, wx1) = (T::of(xt.w_lo), T::of(xt.w_hi));
                        plane[y.lo * w + xt.lo] += gv * wy0 * wx0;
                        plane[y.lo * w + xt.hi] += gv * wy0 * wx1;
                        plane[y.hi * w + xt.lo] += gv * wy1 * wx0;
                        plane[y.hi * w + xt.hi] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), dx))]
        }))
    }

    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("bilinear", format!("expected (N,C,H,W), got {s:?}")));
        }
        self.resize_bilinear(s[2] * 2, s[3] * 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 5.0).unwrap();
        let y = bilinear_upsample(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn row_example() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x).unwrap();
        assert_eq!(&y.data()[..4], &[1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn downscale_averages_pairs() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 4], &[0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = resize_bilinear(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0]);
    }
}
