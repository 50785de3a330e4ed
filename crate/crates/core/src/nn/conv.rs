//! 2-D cross-correlation with zero padding (dense and depthwise).
//!
//! Dense convolution lowers each image to a column matrix and multiplies by
//! the `(C_out, C_in·k·k)` weight matrix; the reduction order per output is
//! (c_in, ky, kx) ascending, matching a direct nested-loop evaluation.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, transpose2d, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2dParams<T> {
    /// `(C_out, C_in, k, k)`
    pub weight: Tensor<T>,
    /// `(C_out)`
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], b: Option<&[usize]>, stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("conv2d", x, w));
        }
        let (n, ci, h, wd) = (x[0], x[1], x[2], x[3]);
        let (co, wci, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wci != ci {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {ci} channels, weight {w:?} expects {wci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("spatial size {h}x{wd} with padding {pad} is smaller than kernel {kh}x{kw}"),
            ));
        }
        if let Some(b) = b {
            if b != [co] {
                return Err(Error::shape("conv2d bias", b, &[co]));
            }
        }
        Ok(Self {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `t`.
    fn valid(&self, t: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        // in = o*stride + t - pad must lie in [0, in_len)
        let lo = if t >= self.pad { 0 } else { (self.pad - t).div_ceil(self.stride) };
        let hi = if in_len + self.pad > t {
            ((in_len + self.pad - t - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kx, g.wo, g.w);
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        let len = ox_hi - ox_lo;
                        dst[ox_lo..ox_hi].copy_from_slice(&plane[iy * g.w + ix0..iy * g.w + ix0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = plane[iy * g.w + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kx, g.wo, g.w);
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox_lo..ox_hi {
                        plane[iy * g.w + ox * g.stride + kx - g.pad] += row[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &Geom) -> Tensor<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.ci * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.co * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for (n, out_n) in out.chunks_mut(g.co * p).enumerate() {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        gemm_acc(g.co, k, p, w.data(), cols, out_n);
        if let Some(b) = b {
            for (row, &bv) in out_n.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.co, g.ho, g.wo], out)
}

struct ConvGrads<T> {
    dx: Option<Tensor<T>>,
    dw: Option<Tensor<T>>,
    db: Option<Tensor<T>>,
}

fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Geom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.ci * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); g.co * k]);
    let mut db = need.2.then(|| vec![T::zero(); g.co]);
    let wt = need.0.then(|| transpose2d(w.data(), g.co, k));
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcol = vec![T::zero(); if need.0 { k * p } else { 0 }];
    for n in 0..g.n {
        let gn = &gy.data()[n * g.co * p..(n + 1) * g.co * p];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(gn.chunks(p)) {
                *acc += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            let colt = transpose2d(cols, k, p);
            gemm_acc(g.co, p, k, gn, &colt, dw);
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm_acc(k, g.co, p, wt, gn, dxn);
            } else {
                dcol.fill(T::zero());
                gemm_acc(k, g.co, p, wt, gn, &mut dcol);
                col2im(&dcol, g, dxn);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        db: db.map(|d| Tensor::from_parts(vec![g.co], d)),
    }
}

/// Dense convolution on plain tensors.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let g = Geom::new(
        x.shape(),
        p.weight.shape(),
        p.bias.as_ref().map(|b| b.shape()),
        p.stride,
        p.padding,
    )?;
    Ok(forward(x, &p.weight, p.bias.as_ref(), &g))
}

#[derive(Debug, Clone, Copy)]
struct DwGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl DwGeom {
    fn new(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("depthwise_conv2d", x, w));
        }
        if w[0] != x[1] || w[1] != 1 || w[2] != w[3] || w[2] % 2 == 0 {
            return Err(Error::invalid(
                "depthwise_conv2d",
                format!("weight {w:?} must be (C, 1, k, k) with odd k for input {x:?}"),
            ));
        }
        if let Some(b) = b {
            if b != [x[1]] {
                return Err(Error::shape("depthwise_conv2d bias", b, &[x[1]]));
            }
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            k: w[2],
            pad: w[2] / 2,
        })
    }
}

fn dw_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &DwGeom) -> Tensor<T> {
    let hw = g.h * g.w;
    let mut out = vec![T::zero(); x.numel()];
    for n in 0..g.n {
        for c in 0..g.c {
            let plane = &x.data()[(n * g.c + c) * hw..][..hw];
            let kern = &w.data()[c * g.k * g.k..][..g.k * g.k];
            let bias = b.map_or(T::zero(), |b| b.data()[c]);
            let dst = &mut out[(n * g.c + c) * hw..][..hw];
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let mut acc = T::zero();
                    for ky in 0..g.k {
                        let Some(iy) = (oy + ky).checked_sub(g.pad).filter(|&v| v < g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = (ox + kx).checked_sub(g.pad).filter(|&v| v < g.w) else { continue };
                            acc += kern[ky * g.k + kx] * plane[iy * g.w + ix];
                        }
                    }
                    dst[oy * g.w + ox] = acc + bias;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn dw_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &DwGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let hw = g.h * g.w;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.c];
    for n in 0..g.n {
        for c in 0..g.c {
            let off = (n * g.c + c) * hw;
            let plane = &x.data()[off..off + hw];
            let gp = &gy.data()[off..off + hw];
            let kern = &w.data()[c * g.k * g.k..][..g.k * g.k];
            let dkern = &mut dw[c * g.k * g.k..][..g.k * g.k];
            let dplane = &mut dx[off..off + hw];
            db[c] += gp.iter().copied().sum::<T>();
            for oy in 0..g.h {
                for ox in 0..g.w {
                    let go = gp[oy * g.w + ox];
                    for ky in 0..g.k {
                        let Some(iy) = (oy + ky).checked_sub(g.pad).filter(|&v| v < g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = (ox + kx).checked_sub(g.pad).filter(|&v| v < g.w) else { continue };
                            dkern[ky * g.k + kx] += go * plane[iy * g.w + ix];
                            dplane[iy * g.w + ix] += go * kern[ky * g.k + kx];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.c], db),
    )
}

/// Per-channel ("same"-padded, stride 1) convolution on plain tensors.
/// Weight shape `(C, 1, k, k)`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let g = DwGeom::new(x.shape(), w.shape(), b.map(|b| b.shape()))?;
    Ok(dw_forward(x, w, b, &g))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let g = Geom::new(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), stride, padding)?;
        let out = forward(&x, &w, b.as_deref(), &g);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().op(out, &inputs, move |gy, need| {
            let grads = backward(&x, &w, gy, &g, (need[0], need[1], need.get(2).copied().unwrap_or(false)));
            let mut v = vec![grads.dx, grads.dw];
            if need.len() == 3 {
                v.push(grads.db);
            }
            v
        }))
    }

    pub fn depthwise_conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let g = DwGeom::new(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()))?;
        let out = dw_forward(&x, &w, b.as_deref(), &g);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = inputs.len() == 3;
        Ok(self.tape().op(out, &inputs, move |gy, _| {
            let (dx, dw, db) = dw_backward(&x, &w, gy, &g);
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        }))
    }
}
