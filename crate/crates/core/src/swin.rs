//! Windowed self-attention and the two-block Swin unit used on every skip
//! connection.
//!
//! Token maps are kept in `(N, H, W, C)` layout inside this module; the
//! public [`SwinPair`] entry points take and return `(N, C, H, W)`.
//!
//! A pair computes
//!
//! ```text
//! ẑ¹ = W-MSA(LN(z⁰)) + z⁰
//! z¹ = MLP(LN(ẑ¹)) + ẑ¹
//! ẑ² = SW-MSA(LN(z¹)) + z¹
//! z² = MLP(LN(ẑ²)) + ẑ²
//! ```
//!
//! where SW-MSA is W-MSA on the map cyclically rolled by `(−⌊M/2⌋, −⌊M/2⌋)`,
//! with an additive mask that blocks attention between tokens that were
//! not adjacent before the roll.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, Init, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Additive mask value between tokens from different pre-roll regions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwinConfig {
    pub dim: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Bias on the query and value projections. Keys never get one: a key
    /// bias shifts every score of a query row equally and cancels in the
    /// softmax.
    pub qv_bias: bool,
}

impl SwinConfig {
    /// Defaults: one head per 32 channels (at least one), MLP ratio 2,
    /// biased query and value projections.
    pub fn new(dim: usize, window: usize) -> Self {
        Self {
            dim,
            window,
            heads: (dim / 32).max(1),
            mlp_ratio: 2,
            qv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "swin dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("swin window {} must be at least 2", self.window)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("swin mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn nhwc(op: &'static str, shape: &[usize], m: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected (N,H,W,C), got {shape:?}")));
    }
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::invalid(op, format!("spatial size {h}x{w} is not divisible by window {m}")));
    }
    Ok((n, h, w, c))
}

/// `(N,H,W,C)` → `(N·(H/M)·(W/M), M·M, C)`, tiles in row-major grid order,
/// tokens in row-major order within each tile.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc("window_partition", x.shape(), m)?;
    x.reshape(&[n * h / m, m, w / m, m * c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(win: &Tensor<T>, m: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = reverse_dims(win.shape(), m, h, w)?;
    win.reshape(&[n * h / m, w / m, m, m * c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, h, w, c])
}

fn reverse_dims(shape: &[usize], m: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || m == 0 || h % m != 0 || w % m != 0 || shape[1] != m * m {
        return Err(Error::invalid(
            "window_reverse",
            format!("windows {shape:?} inconsistent with M={m}, H={h}, W={w}"),
        ));
    }
    let per_image = (h / m) * (w / m);
    if shape[0] % per_image != 0 {
        return Err(Error::invalid(
            "window_reverse",
            format!("{} windows is not a multiple of {per_image} per image", shape[0]),
        ));
    }
    Ok((shape[0] / per_image, shape[2]))
}

fn roll_data<T: Scalar>(x: &[T], n: usize, h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    for b in 0..n {
        for y in 0..h {
            let ty = (y + sy) % h;
            for xx in 0..w {
                let tx = (xx + sx) % w;
                let src = ((b * h + y) * w + xx) * c;
                let dst = ((b * h + ty) * w + tx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Cyclic roll of an `(N,H,W,C)` map: element `(y, x)` moves to
/// `((y+dy) mod H, (x+dx) mod W)`.
pub fn roll2d<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (n, h, w, c) = nhwc("roll2d", x.shape(), 1)?;
    Tensor::new(x.shape(), roll_data(x.data(), n, h, w, c, dy, dx))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn window_partition(self, m: usize) -> Result<Var<'t, T>> {
        let (n, h, w, c) = nhwc("window_partition", &self.shape(), m)?;
        self.reshape(&[n * h / m, m, w / m, m * c])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * (h / m) * (w / m), m * m, c])
    }

    pub fn window_reverse(self, m: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (n, c) = reverse_dims(&self.shape(), m, h, w)?;
        self.reshape(&[n * h / m, w / m, m, m * c])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, h, w, c])
    }

    pub fn roll2d(self, dy: isize, dx: isize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, h, w, c) = nhwc("roll2d", x.shape(), 1)?;
        let out = Tensor::from_parts(x.shape().to_vec(), roll_data(x.data(), n, h, w, c, dy, dx));
        let shape = x.shape().to_vec();
        Ok(self.tape().op(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                shape.clone(),
                roll_data(g.data(), n, h, w, c, -dy, -dx),
            ))]
        }))
    }
}

/// Per-window additive attention bias for the shifted block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    /// `(num_windows, M², M²)`, entries 0 or [`MASK_NEG`].
    pub bias: Tensor<f64>,
}

impl AttnMask {
    pub fn windows(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.bias.shape()[1]
    }

    /// Mask of window `w` as a row-major `M²×M²` slice.
    pub fn window(&self, w: usize) -> &[f64] {
        let t = self.tokens();
        &self.bias.data()[w * t * t..(w + 1) * t * t]
    }

    /// Repeats each window's mask once per head: `(num_windows·heads, M², M²)`.
    fn per_head<T: Scalar>(&self, heads: usize) -> Tensor<T> {
        let t = self.tokens();
        let mut data = Vec::with_capacity(self.windows() * heads * t * t);
        for w in 0..self.windows() {
            for _ in 0..heads {
                data.extend(self.window(w).iter().map(|&v| T::of(v)));
            }
        }
        Tensor::from_parts(vec![self.windows() * heads, t, t], data)
    }
}

/// Mask for shifted-window attention on an `H×W` map with window `M` and
/// shift `⌊M/2⌋`. Positions are labeled by region in the rolled frame;
/// tokens of one window with different labels get [`MASK_NEG`].
pub fn build_shift_mask(h: usize, w: usize, m: usize) -> Result<AttnMask> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::invalid(
            "build_shift_mask",
            format!("spatial size {h}x{w} is not divisible by window {m}"),
        ));
    }
    let s = m / 2;
    let region = |v: usize, len: usize| -> usize {
        if v < len - m {
            0
        } else if v < len - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            labels.push((region(y, h) * 3 + region(x, w)) as f64);
        }
    }
    let label_map = Tensor::<f64>::new(&[1, h, w, 1], labels)?;
    let win = window_partition(&label_map, m)?;
    let (nw, t) = (win.shape()[0], m * m);
    let mut bias = Vec::with_capacity(nw * t * t);
    for wi in 0..nw {
        let lab = &win.data()[wi * t..(wi + 1) * t];
        for i in 0..t {
            for j in 0..t {
                bias.push(if lab[i] == lab[j] { 0.0 } else { MASK_NEG });
            }
        }
    }
    Ok(AttnMask {
        bias: Tensor::new(&[nw, t, t], bias)?,
    })
}

/// Index into the `(2M−1)²` relative-position table for every token pair
/// of an `M×M` window, row-major `(i, j)`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Projection weights of one (S)W-MSA layer.
#[derive(Debug, Clone, Copy)]
pub struct WmsaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// `((2M−1)², heads)`
    pub rel_bias: ParamId,
}

impl WmsaWeights {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &SwinConfig) -> Result<Self> {
        let c = cfg.dim;
        let span = 2 * cfg.window - 1;
        Ok(Self {
            q: b.linear("q", c, c, cfg.qv_bias)?,
            k: b.linear("k", c, c, false)?,
            v: b.linear("v", c, c, cfg.qv_bias)?,
            proj: b.linear("proj", c, c, true)?,
            rel_bias: b.tensor("rel_bias", &[span * span, cfg.heads], Init::Zeros)?,
        })
    }
}

/// Multi-head self-attention inside windows.
///
/// `tokens` is `(B_w, M², C)`; with a mask, `B_w` must be a multiple of the
/// mask's window count and windows are ordered image-major. Returns the
/// projected output and the post-softmax attention `(B_w, heads, M², M²)`.
pub fn wmsa<'t, T: Scalar>(
    g: &Graph<'t, T>,
    tokens: Var<'t, T>,
    cfg: &SwinConfig,
    w: &WmsaWeights,
    mask: Option<&AttnMask>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = tokens.shape();
    let t = cfg.tokens();
    if shape.len() != 3 || shape[1] != t || shape[2] != cfg.dim {
        return Err(Error::invalid(
            "wmsa",
            format!("tokens {shape:?} do not match window {} and dim {}", cfg.window, cfg.dim),
        ));
    }
    cfg.validate()?;
    let (bw, heads, hd) = (shape[0], cfg.heads, cfg.head_dim());
    let split = |v: Var<'t, T>| -> Result<Var<'t, T>> { v.reshape(&[bw, t, heads, hd])?.permute(&[0, 2, 1, 3]) };
    let q = split(w.q.forward(g, tokens)?)?;
    let k = split(w.k.forward(g, tokens)?)?;
    let v = split(w.v.forward(g, tokens)?)?;

    let mut scores = q
        .matmul(k.transpose(2, 3)?)?
        .scale(1.0 / (hd as f64).sqrt());

    let index: Rc<[usize]> = Rc::from(relative_position_index(cfg.window));
    let bias = g
        .param(w.rel_bias)
        .gather_rows(index)?
        .reshape(&[t, t, heads])?
        .permute(&[2, 0, 1])?;
    scores = scores.add(bias)?;

    if let Some(mask) = mask {
        let nw = mask.windows();
        if mask.tokens() != t || bw % nw != 0 {
            return Err(Error::invalid(
                "wmsa",
                format!("mask for {nw} windows of {} tokens does not fit {bw} windows of {t}", mask.tokens()),
            ));
        }
        let m = g.tape().constant(mask.per_head::<T>(heads));
        scores = scores
            .reshape(&[bw / nw, nw * heads, t, t])?
            .add(m)?
            .reshape(&[bw, heads, t, t])?;
    }

    let attn = scores.softmax(3)?;
    let out = attn
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bw, t, cfg.dim])?;
    Ok((w.proj.forward(g, out)?, attn))
}

#[derive(Debug, Clone, Copy)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WmsaWeights,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &SwinConfig, shifted: bool) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        let norm1 = b.layer_norm("norm1", cfg.dim)?;
        let attn = WmsaWeights::build(&mut b.scope("attn"), cfg)?;
        let norm2 = b.layer_norm("norm2", cfg.dim)?;
        let mut mlp = b.scope("mlp");
        let fc1 = mlp.linear("fc1", cfg.dim, hidden, true)?;
        let fc2 = mlp.linear("fc2", hidden, cfg.dim, true)?;
        Ok(Self {
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            shifted,
        })
    }

    /// One block on an `(N,H,W,C)` map. Returns `(ẑ, z)`.
    fn forward<'t, T: Scalar>(
        &self,
        g: &Graph<'t, T>,
        x: Var<'t, T>,
        cfg: &SwinConfig,
        mask: Option<&AttnMask>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = x.shape();
        let (h, w, m) = (shape[1], shape[2], cfg.window);
        let s = cfg.shift() as isize;

        let mut y = self.norm1.forward(g, x)?;
        if self.shifted {
            y = y.roll2d(-s, -s)?;
        }
        let (a, _) = wmsa(g, y.window_partition(m)?, cfg, &self.attn, mask)?;
        let mut a = a.window_reverse(m, h, w)?;
        if self.shifted {
            a = a.roll2d(s, s)?;
        }
        let z_hat = x.add(a)?;

        let hidden = self.fc1.forward(g, self.norm2.forward(g, z_hat)?)?.gelu();
        let z = z_hat.add(self.fc2.forward(g, hidden)?)?;
        Ok((z_hat, z))
    }
}

/// Intermediate token maps of one pair, all `(N,H,W,C)`.
#[derive(Debug, Clone, Copy)]
pub struct SwinActivations<V> {
    pub z_prev: V,
    pub z_hat_l: V,
    pub z_l: V,
    pub z_hat_l1: V,
    pub z_l1: V,
}

/// W-MSA block followed by SW-MSA block.
#[derive(Debug, Clone)]
pub struct SwinPair {
    pub cfg: SwinConfig,
    pub blocks: [SwinBlock; 2],
}

impl SwinPair {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: SwinConfig) -> Result<Self> {
        cfg.validate()?;
        let regular = SwinBlock::build(&mut b.scope("block0"), &cfg, false)?;
        let shifted = SwinBlock::build(&mut b.scope("block1"), &cfg, true)?;
        Ok(Self {
            cfg,
            blocks: [regular, shifted],
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.dim {
            return Err(Error::invalid(
                "swin_pair",
                format!("expected (N,{},H,W), got {shape:?}", self.cfg.dim),
            ));
        }
        let m = self.cfg.window;
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::invalid(
                "swin_pair",
                format!("spatial size {}x{} is not divisible by window {m}", shape[2], shape[3]),
            ));
        }
        Ok(())
    }

    /// Both blocks, keeping every intermediate.
    pub fn forward_traced<'t, T: Scalar>(
        &self,
        g: &Graph<'t, T>,
        x: Var<'t, T>,
    ) -> Result<SwinActivations<Var<'t, T>>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let mask = build_shift_mask(shape[2], shape[3], self.cfg.window)?;
        let z_prev = x.permute(&[0, 2, 3, 1])?;
        let (z_hat_l, z_l) = self.blocks[0].forward(g, z_prev, &self.cfg, None)?;
        let (z_hat_l1, z_l1) = self.blocks[1].forward(g, z_l, &self.cfg, Some(&mask))?;
        Ok(SwinActivations {
            z_prev,
            z_hat_l,
            z_l,
            z_hat_l1,
            z_l1,
        })
    }

    /// `(N,C,H,W)` → `(N,C,H,W)`.
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_traced(g, x)?.z_l1.permute(&[0, 3, 1, 2])
    }

    /// Skip feature `x + pair(x)`.
    pub fn residual<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.add(self.forward(g, x)?)
    }
}
