//! Dense row-major tensors of rank at most 4.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal or value into this type.
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..16])
        }
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() > MAX_RANK {
        return Err(Error::invalid(op, format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(op, format!("zero-sized dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape("tensor", shape)?;
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for shapes that are correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.len() <= MAX_RANK);
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape("tensor", shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![T::zero(); self.data.len()])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid("item", format!("tensor has shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape("reshape", shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    /// Always materializes a new contiguous buffer.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = [false; MAX_RANK];
        if axes.len() != rank {
            return Err(Error::invalid(
                "permute",
                format!("permutation {axes:?} does not match rank {rank}"),
            ));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::invalid("permute", format!("{axes:?} is not a permutation")));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }

        // Pad to rank 4 with leading unit axes.
        let pad = MAX_RANK - rank;
        let mut in_shape = [1usize; MAX_RANK];
        in_shape[pad..].copy_from_slice(&self.shape);
        let mut in_strides = [0usize; MAX_RANK];
        let mut s = 1;
        for d in (0..MAX_RANK).rev() {
            in_strides[d] = s;
            s *= in_shape[d];
        }
        let mut perm = [0usize, 1, 2, 3];
        for (i, &a) in axes.iter().enumerate() {
            perm[pad + i] = pad + a;
        }
        let out_shape: [usize; MAX_RANK] = std::array::from_fn(|d| in_shape[perm[d]]);
        let st: [usize; MAX_RANK] = std::array::from_fn(|d| in_strides[perm[d]]);

        let mut out = Vec::with_capacity(self.data.len());
        for i0 in 0..out_shape[0] {
            for i1 in 0..out_shape[1] {
                for i2 in 0..out_shape[2] {
                    let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                    if st[3] == 1 {
                        out.extend_from_slice(&self.data[base..base + out_shape[3]]);
                    } else {
                        out.extend((0..out_shape[3]).map(|i3| self.data[base + i3 * st[3]]));
                    }
                }
            }
        }
        let shape = axes.iter().map(|&a| self.shape[a]).collect();
        Ok(Self::from_parts(shape, out))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(Error::invalid("transpose", format!("axes ({a},{b}) out of range for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Element-wise `a op b`. `b` must either match `a` exactly or equal
    /// a trailing suffix of `a`'s shape, in which case it repeats.
    pub fn binary(&self, op: BinaryOp, other: &Self) -> Result<Self> {
        if !broadcasts_onto(&other.shape, &self.shape) {
            return Err(Error::shape(op_name(op), &self.shape, &other.shape));
        }
        let n = other.data.len();
        let mut out = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(n) {
            out.extend(chunk.iter().zip(&other.data).map(|(&x, &y)| op.apply(x, y)));
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, other)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); plan.batch * plan.m * plan.p];
        let (a_step, b_step) = (plan.a_batched as usize * plan.m * plan.k, plan.b_batched as usize * plan.k * plan.p);
        for (bi, c) in out.chunks_mut(plan.m * plan.p).enumerate() {
            let a = &self.data[bi * a_step..bi * a_step + plan.m * plan.k];
            let b = &other.data[bi * b_step..bi * b_step + plan.k * plan.p];
            gemm_acc(plan.m, plan.k, plan.p, a, b, c);
        }
        Ok(Self::from_parts(plan.out_shape, out))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split("softmax", &self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(self.data[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape.iter().zip(&first.shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Self::from_parts(shape, out))
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

/// True when `small` equals a trailing suffix of `big` (or the whole shape).
pub(crate) fn broadcasts_onto(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Splits a shape into (outer, axis length, inner) products.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ab, am) = a.split_at(a.len() - 2);
        let (bb, bm) = b.split_at(b.len() - 2);
        if am[1] != bm[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let (a_batched, b_batched) = (!ab.is_empty(), !bb.is_empty());
        if a_batched && b_batched && ab != bb {
            return Err(Error::shape("matmul", a, b));
        }
        let batch_dims = if a_batched { ab } else { bb };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([am[0], bm[1]]);
        Ok(Self {
            batch: batch_dims.iter().product(),
            m: am[0],
            k: am[1],
            p: bm[1],
            a_batched,
            b_batched,
            out_shape,
        })
    }
}

const PAR_THRESHOLD: usize = 1 << 16;
const COL_BLOCK: usize = 512;

/// `c += a · b` for row-major `a: m×k`, `b: k×p`, `c: m×p`.
///
/// Every output element accumulates its k products in ascending k order,
/// which makes results identical to a naive triple loop.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    if m == 0 || p == 0 {
        return;
    }
    const ROWS: usize = 4;
    let kernel = |(blk, cb): (usize, &mut [T])| {
        let i0 = blk * ROWS;
        let rows = cb.len() / p;
        for j0 in (0..p).step_by(COL_BLOCK) {
            let j1 = (j0 + COL_BLOCK).min(p);
            if rows == ROWS {
                let (r0, rest) = cb.split_at_mut(p);
                let (r1, rest) = rest.split_at_mut(p);
                let (r2, r3) = rest.split_at_mut(p);
                let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                for kk in 0..k {
                    let brow = &b[kk * p + j0..kk * p + j1];
                    let a0 = a[i0 * k + kk];
                    let a1 = a[(i0 + 1) * k + kk];
                    let a2 = a[(i0 + 2) * k + kk];
                    let a3 = a[(i0 + 3) * k + kk];
                    for ((((x0, x1), x2), x3), &bv) in c0
                        .iter_mut()
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                        .zip(brow)
                    {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
            } else {
                for r in 0..rows {
                    let crow = &mut cb[r * p + j0..r * p + j1];
                    for kk in 0..k {
                        let av = a[(i0 + r) * k + kk];
                        let brow = &b[kk * p + j0..kk * p + j1];
                        for (x, &bv) in crow.iter_mut().zip(brow) {
                            *x += av * bv;
                        }
                    }
                }
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > ROWS {
        c.par_chunks_mut(ROWS * p).enumerate().for_each(kernel);
    } else {
        c.chunks_mut(ROWS * p).enumerate().for_each(kernel);
    }
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose2d<T: Copy>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        out.extend((0..r).map(|i| src[i * c + j]));
    }
    out
}
