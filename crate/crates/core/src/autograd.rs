//! Reverse-mode differentiation on an explicit tape.
//!
//! A [`Tape`] is built per forward pass. Every differentiable operation
//! appends a node holding its output value and a closure that maps the
//! output gradient to input gradients. [`Tape::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! An inference tape (`Tape::inference`) stores values only; no closures
//! are kept and `backward` is rejected.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, gemm_acc, transpose2d, MatmulPlan, Scalar, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    branches: Option<RefCell<Vec<u64>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            branches: None,
        }
    }

    /// A value-only tape for inference.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            branches: None,
        }
    }

    /// A value-only tape that also fingerprints the branch every piecewise
    /// operation takes (ReLU masks, pooling argmaxes). Two evaluations with
    /// equal [`Tape::branches`] lie on the same smooth piece.
    pub fn inference_with_branches() -> Self {
        Self {
            branches: Some(RefCell::new(Vec::new())),
            ..Self::inference()
        }
    }

    pub fn branches(&self) -> Vec<u64> {
        self.branches.as_ref().map(|b| b.borrow().clone()).unwrap_or_default()
    }

    pub(crate) fn tracks_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn note_branch(&self, key: impl std::hash::Hash) {
        if let Some(b) = &self.branches {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            key.hash(&mut h);
            b.borrow_mut().push(std::hash::Hasher::finish(&h));
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is tracked (when recording).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: self.recording,
            inputs: Vec::new(),
            backward: None,
        })
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            inputs: Vec::new(),
            backward: None,
        })
    }

    /// Records an operation. The closure receives the output gradient and a
    /// flag per input telling whether that input needs a gradient.
    pub(crate) fn op<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                requires_grad,
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node {
                value: Rc::new(value),
                requires_grad: false,
                inputs: Vec::new(),
                backward: None,
            }
        };
        self.push(node)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar loss. Gradients of repeated uses sum.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NoTape);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![T::one()]));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = bw(&g, &need);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&inp, ig), &needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                let Some(ig) = ig else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(ig.shape(), nodes[inp].value.shape());
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient of `var`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| var.value().zeros_like())
    }
}

/// Handle to a node of a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn reduce_to_suffix<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.add(&b)?;
        let b_shape = b.shape().to_vec();
        Ok(self.tape.op(out, &[self, other], move |g, _| {
            vec![Some(g.clone()), Some(reduce_to_suffix(g, &b_shape))]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.sub(&b)?;
        let b_shape = b.shape().to_vec();
        Ok(self.tape.op(out, &[self, other], move |g, need| {
            let gb = need[1].then(|| reduce_to_suffix(g, &b_shape).map(|v| -v));
            vec![Some(g.clone()), gb]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.mul(&b)?;
        Ok(self.tape.op(out, &[self, other], move |g, need| {
            let ga = need[0].then(|| g.mul(&b).expect("shape checked in forward"));
            let gb = need[1].then(|| {
                let prod = g.mul(&a).expect("shape checked in forward");
                reduce_to_suffix(&prod, b.shape())
            });
            vec![ga, gb]
        }))
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().map(|v| v * c);
        self.tape
            .op(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let out = a.matmul(&b)?;
        Ok(self.tape.op(out, &[self, other], move |g, need| {
            let (m, k, p) = (plan.m, plan.k, plan.p);
            let a_len = if plan.a_batched { plan.batch * m * k } else { m * k };
            let b_len = if plan.b_batched { plan.batch * k * p } else { k * p };
            let mut ga = need[0].then(|| vec![T::zero(); a_len]);
            let mut gb = need[1].then(|| vec![T::zero(); b_len]);
            for bi in 0..plan.batch {
                let a_off = if plan.a_batched { bi * m * k } else { 0 };
                let b_off = if plan.b_batched { bi * k * p } else { 0 };
                let gc = &g.data()[bi * m * p..(bi + 1) * m * p];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ
                    let bt = transpose2d(&b.data()[b_off..b_off + k * p], k, p);
                    gemm_acc(m, p, k, gc, &bt, &mut ga[a_off..a_off + m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC
                    let at = transpose2d(&a.data()[a_off..a_off + m * k], m, k);
                    gemm_acc(k, m, p, &at, gc, &mut gb[b_off..b_off + k * p]);
                }
            }
            vec![
                ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
            ]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        let in_shape = self.shape();
        Ok(self
            .tape
            .op(out, &[self], move |g, _| vec![Some(g.reshape(&in_shape).expect("count preserved"))]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape
            .op(out, &[self], move |g, _| vec![Some(g.permute(&inverse).expect("valid permutation"))]))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::invalid("transpose", format!("axes ({a},{b}) out of range for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, len, inner) = axis_split("softmax", x.shape(), axis)?;
        let y = Rc::new(x.softmax(axis)?);
        let y_out = (*y).clone();
        Ok(self.tape.op(y_out, &[self], move |g, _| {
            let (yd, gd) = (y.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += yd[base + j * inner] * gd[base + j * inner];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        dx[idx] = yd[idx] * (gd[idx] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape.op(out, &[self], move |g, _| {
            let gv = g.data()[0];
            vec![Some(Tensor::from_parts(shape.clone(), vec![gv; shape.iter().product()]))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let outer: usize = shapes[0][..axis].iter().product();
        let inner: usize = shapes[0][axis + 1..].iter().product();
        Ok(first.tape.op(out, parts, move |g, need| {
            let total: usize = shapes.iter().map(|s| s[axis]).sum::<usize>() * inner;
            let mut offset = 0;
            shapes
                .iter()
                .zip(need)
                .map(|(s, &needed)| {
                    let block = s[axis] * inner;
                    let start = offset;
                    offset += block;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + start..o * total + start + block]);
                        }
                        Tensor::from_parts(s.clone(), d)
                    })
                })
                .collect()
        }))
    }

    /// Row lookup: `self` is a table `(R, W)`, output is `(index.len(), W)`
    /// with row `i` equal to `table[index[i]]`.
    pub fn gather_rows(self, index: Rc<[usize]>) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::invalid("gather_rows", format!("table must be 2-D, got {:?}", table.shape())));
        }
        let (rows, width) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
        }
        let out = Tensor::from_parts(vec![index.len(), width], out);
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut d = vec![T::zero(); rows * width];
            for (r, &i) in index.iter().enumerate() {
                for (dst, &v) in d[i * width..(i + 1) * width].iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                    *dst += v;
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, width], d))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inference_tape_has_no_backward() {
        let tape = Tape::inference();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let s = x.sum();
        assert_eq!(s.value().data(), &[3.0]);
        assert!(matches!(tape.backward(s), Err(Error::NoTape)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn broadcast_bias_gradient_sums() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2], &[0.5, 0.5]));
        let g = tape.backward(x.add(b).unwrap().sum()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let tape = Tape::new();
        let table = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let idx: Rc<[usize]> = Rc::from(vec![2usize, 0, 2]);
        let out = table.gather_rows(idx).unwrap();
        assert_eq!(out.value().data(), &[3.0, 1.0, 3.0]);
        let g = tape.backward(out.sum()).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 0.0, 2.0]);
    }
}
