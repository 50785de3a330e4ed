//! Axial channel-group shifting, the parallel 1/3/5 convolution module and
//! the serial shift-MLP bottleneck block built from them.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Conv, DepthwiseConv, Graph, LayerNorm, ParamBuilder};
use crate::tensor::{Scalar, Tensor};

/// Kernel sizes of the parallel convolution branches.
pub const PARALLEL_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftAxis {
    Height,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxialShiftSpec {
    shift_size: usize,
    axis: ShiftAxis,
}

/// One contiguous channel group and its displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftGroup {
    pub start: usize,
    pub len: usize,
    pub stride: isize,
}

impl AxialShiftSpec {
    pub fn new(shift_size: usize, axis: ShiftAxis) -> Result<Self> {
        if shift_size == 0 || shift_size % 2 == 0 {
            return Err(Error::Config(format!("shift_size must be odd and positive, got {shift_size}")));
        }
        Ok(Self { shift_size, axis })
    }

    pub fn shift_size(&self) -> usize {
        self.shift_size
    }

    pub fn axis(&self) -> ShiftAxis {
        self.axis
    }

    /// Centered strides `−(s−1)/2 ..= (s−1)/2`.
    pub fn strides(&self) -> Vec<isize> {
        let half = (self.shift_size / 2) as isize;
        (-half..=half).collect()
    }

    /// Splits `channels` into `s` groups, earlier groups taking the remainder.
    pub fn groups(&self, channels: usize) -> Result<Vec<ShiftGroup>> {
        let s = self.shift_size;
        if channels < s {
            return Err(Error::invalid(
                "axial_shift",
                format!("{channels} channels is fewer than shift_size {s}"),
            ));
        }
        let (base, extra) = (channels / s, channels % s);
        let mut start = 0;
        Ok(self
            .strides()
            .into_iter()
            .enumerate()
            .map(|(g, stride)| {
                let len = base + usize::from(g < extra);
                let group = ShiftGroup { start, len, stride };
                start += len;
                group
            })
            .collect())
    }
}

/// Moves each group by `sign·stride` along the axis, zero-filling.
fn shift_data<T: Scalar>(x: &[T], shape: &[usize], groups: &[ShiftGroup], axis: ShiftAxis, sign: isize) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for grp in groups {
            let d = sign * grp.stride;
            for ch in grp.start..grp.start + grp.len {
                let plane = (b * c + ch) * h * w;
                let src = &x[plane..plane + h * w];
                let dst = &mut out[plane..plane + h * w];
                match axis {
                    ShiftAxis::Height => {
                        for y in 0..h {
                            let sy = y as isize - d;
                            if sy >= 0 && (sy as usize) < h {
                                let sy = sy as usize;
                                dst[y * w..(y + 1) * w].copy_from_slice(&src[sy * w..(sy + 1) * w]);
                            }
                        }
                    }
                    ShiftAxis::Width => {
                        for y in 0..h {
                            for xx in 0..w {
                                let sx = xx as isize - d;
                                if sx >= 0 && (sx as usize) < w {
                                    dst[y * w + xx] = src[y * w + sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_nchw(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected (N,C,H,W), got {shape:?}")));
    }
    Ok(())
}

/// `out[.., i] = x[.., i − stride]` per channel group along the chosen axis.
pub fn axial_shift<T: Scalar>(x: &Tensor<T>, spec: &AxialShiftSpec) -> Result<Tensor<T>> {
    check_nchw("axial_shift", x.shape())?;
    let groups = spec.groups(x.shape()[1])?;
    Tensor::new(x.shape(), shift_data(x.data(), x.shape(), &groups, spec.axis, 1))
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn axial_shift(self, spec: &AxialShiftSpec) -> Result<Var<'t, T>> {
        let x = self.value();
        check_nchw("axial_shift", x.shape())?;
        let groups = spec.groups(x.shape()[1])?;
        let axis = spec.axis;
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), shift_data(x.data(), &shape, &groups, axis, 1));
        Ok(self.tape().op(out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(
                shape.clone(),
                shift_data(g.data(), &shape, &groups, axis, -1),
            ))]
        }))
    }
}

/// Depthwise 1×1, 3×3 and 5×5 branches, same-padded and summed.
#[derive(Debug, Clone, Copy)]
pub struct ParallelConv {
    pub branches: [DepthwiseConv; 3],
}

impl ParallelConv {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let [k1, k3, k5] = PARALLEL_KERNELS;
        Ok(Self {
            branches: [
                b.depthwise(&format!("k{k1}"), channels, k1)?,
                b.depthwise(&format!("k{k3}"), channels, k3)?,
                b.depthwise(&format!("k{k5}"), channels, k5)?,
            ],
        })
    }

    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut acc = self.branches[0].forward(g, x)?;
        for branch in &self.branches[1..] {
            acc = acc.add(branch.forward(g, x)?)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcasConfig {
    pub dim: usize,
    pub shift_size: usize,
    pub expand_ratio: usize,
    /// Without the parallel module the block is a plain serial shift-MLP.
    pub parallel_conv: bool,
}

impl PcasConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            shift_size: 5,
            expand_ratio: 1,
            parallel_conv: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.expand_ratio
    }

    pub fn validate(&self) -> Result<()> {
        AxialShiftSpec::new(self.shift_size, ShiftAxis::Height)?;
        if self.expand_ratio == 0 {
            return Err(Error::Config("expand_ratio must be positive".into()));
        }
        if self.hidden() < self.shift_size {
            return Err(Error::Config(format!(
                "expanded width {} is smaller than shift_size {}",
                self.hidden(),
                self.shift_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PcasBlock {
    pub cfg: PcasConfig,
    pub norm: LayerNorm,
    pub fc1: Conv,
    pub pconv: Option<ParallelConv>,
    pub fc_mid: Conv,
    pub fc2: Conv,
}

impl PcasBlock {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: PcasConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden();
        let norm = b.layer_norm("norm", cfg.dim)?;
        let fc1 = b.projection("fc1", cfg.dim, hidden)?;
        let pconv = if cfg.parallel_conv {
            Some(ParallelConv::build(&mut b.scope("pconv"), hidden)?)
        } else {
            None
        };
        let fc_mid = b.projection("fc_mid", hidden, hidden)?;
        let fc2 = b.projection("fc2", hidden, cfg.dim)?;
        Ok(Self {
            cfg,
            norm,
            fc1,
            pconv,
            fc_mid,
            fc2,
        })
    }

    /// `x + fc2(shift_w(gelu(fc_mid(shift_h(pconv(gelu(fc1(LN(x)))))))))`
    pub fn forward<'t, T: Scalar>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.dim {
            return Err(Error::invalid(
                "pcas_block",
                format!("expected (N,{},H,W), got {shape:?}", self.cfg.dim),
            ));
        }
        let along_h = AxialShiftSpec::new(self.cfg.shift_size, ShiftAxis::Height)?;
        let along_w = AxialShiftSpec::new(self.cfg.shift_size, ShiftAxis::Width)?;

        let mut h = self.fc1.forward(g, self.norm.forward_nchw(g, x)?)?.gelu();
        if let Some(pconv) = &self.pconv {
            h = pconv.forward(g, h)?;
        }
        h = h.axial_shift(&along_h)?;
        h = self.fc_mid.forward(g, h)?.gelu();
        h = h.axial_shift(&along_w)?;
        h = self.fc2.forward(g, h)?;
        x.add(h)
    }
}
