//! Reverse-mode automatic differentiation at tensor granularity.
//!
//! A [`Tape`] is an append-only list of nodes; each op records its inputs by
//! node id, so inputs always precede the nodes that consume them and the
//! list is topologically ordered by construction. [`Tape::backward`] seeds
//! the scalar loss with gradient one and walks the nodes in strict reverse
//! insertion order, accumulating into each input by summation. A tape runs
//! backward at most once; higher-order differentiation is out of scope and
//! rejected explicitly.

use std::fmt;

use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on its tape.
pub type NodeId = usize;

/// Errors raised by tape construction and backward passes.
#[derive(Clone, Debug, PartialEq)]
pub enum AutodiffError {
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    BadRank { shape: Vec<usize>, expected: usize },
    DivisionByZero,
    NonFiniteInput { op: &'static str },
    NonScalarLoss { shape: Vec<usize> },
    DoubleBackward,
    InvalidTargetSize { out: (usize, usize), input: (usize, usize) },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            AutodiffError::BadRank { shape, expected } => {
                write!(f, "expected rank {expected}, got shape {shape:?}")
            }
            AutodiffError::DivisionByZero => write!(f, "division by zero"),
            AutodiffError::NonFiniteInput { op } => {
                write!(f, "non-finite input to {op}")
            }
            AutodiffError::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            AutodiffError::DoubleBackward => {
                write!(f, "backward already ran on this tape")
            }
            AutodiffError::InvalidTargetSize { out, input } => {
                write!(f, "invalid target size {out:?} for input {input:?}")
            }
        }
    }
}

impl std::error::Error for AutodiffError {}

pub type AdResult<T> = Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: T },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, rows: usize, cols: usize },
    Reshape { x: NodeId },
    SliceRows { x: NodeId, r0: usize, rows: usize, cols: usize },
    ConcatRows { a: NodeId, rows_a: usize, b: NodeId, cols: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId, n: usize, d_in: usize, d_out: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, ci: usize, h: usize, wdt: usize, co: usize },
    Silu { x: NodeId },
    Sqrt { x: NodeId },
    SoftmaxRows { x: NodeId, rows: usize, cols: usize },
    Pool { x: NodeId, c: usize, h: usize, w: usize, out_h: usize, out_w: usize },
    Rope { x: NodeId, n: usize, d: usize, cos: Vec<T>, sin: Vec<T> },
    ColSums { x: NodeId, rows: usize, cols: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Append-only autodiff tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Only leaves may require gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id].data
    }

    /// The value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::from_vec(&self.nodes[id].shape, self.nodes[id].data.clone())
    }

    /// Gradient of the loss w.r.t. a node, if backward produced one.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> AdResult<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn rank2(&self, id: NodeId) -> AdResult<(usize, usize)> {
        match self.nodes[id].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(AutodiffError::BadRank { shape: self.nodes[id].shape.clone(), expected: 2 }),
        }
    }

    fn rank3(&self, id: NodeId) -> AdResult<(usize, usize, usize)> {
        match self.nodes[id].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(AutodiffError::BadRank { shape: self.nodes[id].shape.clone(), expected: 3 }),
        }
    }

    // ───────────────────────── element-wise ops ─────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.same_shape(a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.needs(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.same_shape(a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.needs(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.same_shape(a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.needs(&[a, b]), Op::Mul(a, b)))
    }

    /// Element-wise division; every divisor entry must be nonzero.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.same_shape(a, b)?;
        if self.nodes[b].data.iter().any(|v| *v == T::zero()) {
            return Err(AutodiffError::DivisionByZero);
        }
        let data = self.zip(a, b, |x, y| x / y);
        Ok(self.push(self.nodes[a].shape.clone(), data, self.needs(&[a, b]), Op::Div(a, b)))
    }

    /// `scale · x + shift`, applied element-wise with scalar constants.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let data = self.nodes[x].data.iter().map(|&v| scale * v + shift).collect();
        let needs = self.nodes[x].needs_grad;
        self.push(self.nodes[x].shape.clone(), data, needs, Op::Affine { x, scale })
    }

    pub fn add_scalar(&mut self, x: NodeId, s: T) -> NodeId {
        self.affine(x, T::one(), s)
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: T) -> NodeId {
        self.affine(x, s, T::zero())
    }

    pub fn div_scalar(&mut self, x: NodeId, s: T) -> AdResult<NodeId> {
        if s == T::zero() {
            return Err(AutodiffError::DivisionByZero);
        }
        Ok(self.affine(x, T::one() / s, T::zero()))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ───────────────────────── linear algebra ─────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (m, ka) = self.rank2(a)?;
        let (kb, n) = self.rank2(b)?;
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let data = kernels::matmul_nn(&self.nodes[a].data, &self.nodes[b].data, m, ka, n);
        Ok(self.push(vec![m, n], data, self.needs(&[a, b]), Op::MatMul { a, b, m, k: ka, n }))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> AdResult<NodeId> {
        let (r, c) = self.rank2(x)?;
        let data = kernels::transpose(&self.nodes[x].data, r, c);
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(vec![c, r], data, needs, Op::Transpose { x, rows: r, cols: c }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> AdResult<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[x].data.len() {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[x].shape.clone(),
                right: shape.to_vec(),
            });
        }
        let data = self.nodes[x].data.clone();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { x }))
    }

    /// Rows `r0..r1` of a 2-d node.
    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> AdResult<NodeId> {
        let (rows, cols) = self.rank2(x)?;
        if r0 >= r1 || r1 > rows {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[x].shape.clone(),
                right: vec![r0, r1],
            });
        }
        let data = self.nodes[x].data[r0 * cols..r1 * cols].to_vec();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(
            vec![r1 - r0, cols],
            data,
            needs,
            Op::SliceRows { x, r0, rows, cols },
        ))
    }

    /// Stacks two 2-d nodes with equal column counts.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (ra, ca) = self.rank2(a)?;
        let (rb, cb) = self.rank2(b)?;
        if ca != cb {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(&self.nodes[a].data);
        data.extend_from_slice(&self.nodes[b].data);
        Ok(self.push(
            vec![ra + rb, ca],
            data,
            self.needs(&[a, b]),
            Op::ConcatRows { a, rows_a: ra, b, cols: ca },
        ))
    }

    /// Affine map on the last axis: `x: n×d_in`, `w: d_in×d_out`, `b: d_out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (n, d_in) = self.rank2(x)?;
        let (wi, d_out) = self.rank2(w)?;
        if wi != d_in || self.nodes[b].shape != [d_out] {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[x].shape.clone(),
                right: self.nodes[w].shape.clone(),
            });
        }
        let data = kernels::linear_forward(
            &self.nodes[x].data,
            &self.nodes[w].data,
            &self.nodes[b].data,
            n,
            d_in,
            d_out,
        );
        Ok(self.push(
            vec![n, d_out],
            data,
            self.needs(&[x, w, b]),
            Op::Linear { x, w, b, n, d_in, d_out },
        ))
    }

    /// 3×3 convolution, stride 1, pad 1 (the only geometry this crate needs).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (ci, h, wdt) = self.rank3(x)?;
        let wk = self.nodes[w].shape.clone();
        let (co, wci, kh, kw) = match wk[..] {
            [co, wci, kh, kw] => (co, wci, kh, kw),
            _ => return Err(AutodiffError::BadRank { shape: wk, expected: 4 }),
        };
        if wci != ci || kh != 3 || kw != 3 || self.nodes[b].shape != [co] {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[x].shape.clone(),
                right: self.nodes[w].shape.clone(),
            });
        }
        let data = kernels::conv3x3_forward(
            &self.nodes[x].data,
            &self.nodes[w].data,
            &self.nodes[b].data,
            ci,
            h,
            wdt,
            co,
        );
        Ok(self.push(
            vec![co, h, wdt],
            data,
            self.needs(&[x, w, b]),
            Op::Conv2d { x, w, b, ci, h, wdt, co },
        ))
    }

    // ───────────────────────── nonlinearities ─────────────────────────

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = kernels::silu_slice(&self.nodes[x].data);
        let needs = self.nodes[x].needs_grad;
        self.push(self.nodes[x].shape.clone(), data, needs, Op::Silu { x })
    }

    /// Element-wise square root; inputs must be nonnegative.
    pub fn sqrt(&mut self, x: NodeId) -> AdResult<NodeId> {
        if self.nodes[x].data.iter().any(|v| *v < T::zero()) {
            return Err(AutodiffError::NonFiniteInput { op: "sqrt" });
        }
        let data = self.nodes[x].data.iter().map(|v| v.sqrt()).collect();
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(self.nodes[x].shape.clone(), data, needs, Op::Sqrt { x }))
    }

    /// Row-wise softmax with row-max subtraction; rejects non-finite input.
    pub fn softmax_rows(&mut self, x: NodeId) -> AdResult<NodeId> {
        let (rows, cols) = self.rank2(x)?;
        let data = kernels::softmax_rows(&self.nodes[x].data, rows, cols)
            .ok_or(AutodiffError::NonFiniteInput { op: "softmax_rows" })?;
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(vec![rows, cols], data, needs, Op::SoftmaxRows { x, rows, cols }))
    }

    // ───────────────────────── pooling and position ─────────────────────────

    /// Adaptive average pooling onto a target no larger than the input.
    pub fn adaptive_avg_pool2d(&mut self, x: NodeId, out_h: usize, out_w: usize) -> AdResult<NodeId> {
        let (_, h, w) = self.rank3(x)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(AutodiffError::InvalidTargetSize { out: (out_h, out_w), input: (h, w) });
        }
        self.pool_unchecked(x, out_h, out_w)
    }

    /// Pool-rule resize in either direction (replication when enlarging).
    pub fn resize_pool(&mut self, x: NodeId, out_h: usize, out_w: usize) -> AdResult<NodeId> {
        let (_, h, w) = self.rank3(x)?;
        if out_h == 0 || out_w == 0 {
            return Err(AutodiffError::InvalidTargetSize { out: (out_h, out_w), input: (h, w) });
        }
        self.pool_unchecked(x, out_h, out_w)
    }

    fn pool_unchecked(&mut self, x: NodeId, out_h: usize, out_w: usize) -> AdResult<NodeId> {
        let (c, h, w) = self.rank3(x)?;
        let data = kernels::pool_general(&self.nodes[x].data, c, h, w, out_h, out_w);
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(
            vec![c, out_h, out_w],
            data,
            needs,
            Op::Pool { x, c, h, w, out_h, out_w },
        ))
    }

    /// Rotates feature pairs of a `n×d` node by precomputed angle tables.
    pub fn rope_rows(&mut self, x: NodeId, cos: &[T], sin: &[T]) -> AdResult<NodeId> {
        let (n, d) = self.rank2(x)?;
        if d % 2 != 0 || cos.len() != n * d / 2 || sin.len() != n * d / 2 {
            return Err(AutodiffError::ShapeMismatch {
                left: self.nodes[x].shape.clone(),
                right: vec![cos.len(), sin.len()],
            });
        }
        let data = kernels::rotate_pairs(&self.nodes[x].data, n, d, cos, sin, false);
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(
            vec![n, d],
            data,
            needs,
            Op::Rope { x, n, d, cos: cos.to_vec(), sin: sin.to_vec() },
        ))
    }

    // ───────────────────────── reductions ─────────────────────────

    /// Sums each column of a 2-d node, producing a `1×cols` row.
    pub fn col_sums(&mut self, x: NodeId) -> AdResult<NodeId> {
        let (rows, cols) = self.rank2(x)?;
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            let row = &self.nodes[x].data[r * cols..(r + 1) * cols];
            for (d, &v) in data.iter_mut().zip(row.iter()) {
                *d = *d + v;
            }
        }
        let needs = self.nodes[x].needs_grad;
        Ok(self.push(vec![1, cols], data, needs, Op::ColSums { x, rows, cols }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in &self.nodes[x].data {
            s = s + v;
        }
        let needs = self.nodes[x].needs_grad;
        self.push(vec![1], vec![s], needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len();
        let mut s = T::zero();
        for &v in &self.nodes[x].data {
            s = s + v;
        }
        let needs = self.nodes[x].needs_grad;
        self.push(vec![1], vec![s / T::from_count(n)], needs, Op::MeanAll { x })
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss node.
    ///
    /// Populates gradients for every `requires_grad` leaf; leaves the loss
    /// cannot reach get explicit zeros. A second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> AdResult<()> {
        if self.ran_backward {
            return Err(AutodiffError::DoubleBackward);
        }
        self.ran_backward = true;
        if self.nodes[loss].data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss].needs_grad {
            self.grads[loss] = Some(vec![T::one()]);
            for id in (0..=loss).rev() {
                if self.grads[id].is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                    continue;
                }
                let g = self.grads[id].take().expect("checked above");
                let op = self.nodes[id].op.clone();
                self.propagate(id, op, g);
            }
        }
        // Reachability does not exempt a leaf from having a gradient: absent
        // contributions mean a zero gradient.
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf)
                && self.nodes[id].needs_grad
                && self.grads[id].is_none()
            {
                self.grads[id] = Some(vec![T::zero(); self.nodes[id].data.len()]);
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contrib: Vec<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => kernels::add_assign(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, id: NodeId, op: Op<T>, g: Vec<T>) {
        match op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g);
            }
            Op::Sub(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<T> =
                    g.iter().zip(self.nodes[b].data.iter()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> =
                    g.iter().zip(self.nodes[a].data.iter()).map(|(&gv, &av)| gv * av).collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Div(a, b) => {
                let da: Vec<T> =
                    g.iter().zip(self.nodes[b].data.iter()).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(self.nodes[id].data.iter().zip(self.nodes[b].data.iter()))
                    .map(|(&gv, (&ov, &bv))| -gv * ov / bv)
                    .collect();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Affine { x, scale } => {
                self.accum(x, g.iter().map(|&v| v * scale).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                let da = kernels::matmul_nt(&g, &self.nodes[b].data, m, n, k);
                let db = kernels::matmul_tn(&self.nodes[a].data, &g, k, m, n);
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Transpose { x, rows, cols } => {
                self.accum(x, kernels::transpose(&g, cols, rows));
            }
            Op::Reshape { x } => {
                self.accum(x, g);
            }
            Op::SliceRows { x, r0, rows, cols } => {
                let mut dx = vec![T::zero(); rows * cols];
                dx[r0 * cols..r0 * cols + g.len()].copy_from_slice(&g);
                self.accum(x, dx);
            }
            Op::ConcatRows { a, rows_a, b, cols } => {
                let split = rows_a * cols;
                self.accum(a, g[..split].to_vec());
                self.accum(b, g[split..].to_vec());
            }
            Op::Linear { x, w, b, n, d_in, d_out } => {
                let dx = kernels::matmul_nt(&g, &self.nodes[w].data, n, d_out, d_in);
                let dw = kernels::matmul_tn(&self.nodes[x].data, &g, d_in, n, d_out);
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks_exact(d_out) {
                    kernels::add_assign(&mut db, row);
                }
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::Conv2d { x, w, b, ci, h, wdt, co } => {
                let hw = h * wdt;
                let cols = kernels::im2col_3x3(&self.nodes[x].data, ci, h, wdt);
                let dw = kernels::matmul_nt(&g, &cols, co, hw, ci * 9);
                let dcols = kernels::matmul_tn(&self.nodes[w].data, &g, ci * 9, co, hw);
                let dx = kernels::col2im_3x3(&dcols, ci, h, wdt);
                let mut db = vec![T::zero(); co];
                for (o, slot) in db.iter_mut().enumerate() {
                    for &v in &g[o * hw..(o + 1) * hw] {
                        *slot = *slot + v;
                    }
                }
                self.accum(x, dx);
                self.accum(w, dw);
                self.accum(b, db);
            }
            Op::Silu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.nodes[x].data.iter())
                    .map(|(&gv, &xv)| {
                        let s = kernels::sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.accum(x, dx);
            }
            Op::Sqrt { x } => {
                let two = T::lit(2.0);
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.nodes[id].data.iter())
                    .map(|(&gv, &yv)| gv / (two * yv))
                    .collect();
                self.accum(x, dx);
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let y = &self.nodes[id].data;
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr.iter()) {
                        dot = dot + gv * yv;
                    }
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accum(x, dx);
            }
            Op::Pool { x, c, h, w, out_h, out_w } => {
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let src = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                    let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..out_h {
                        let (y0, y1) = kernels::pool_window(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1) = kernels::pool_window(ox, w, out_w);
                            let share = src[oy * out_w + ox]
                                / T::from_count((y1 - y0) * (x1 - x0));
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dst[yy * w + xx] = dst[yy * w + xx] + share;
                                }
                            }
                        }
                    }
                }
                self.accum(x, dx);
            }
            Op::Rope { x, n, d, cos, sin } => {
                self.accum(x, kernels::rotate_pairs(&g, n, d, &cos, &sin, true));
            }
            Op::ColSums { x, rows, cols } => {
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols..(r + 1) * cols].copy_from_slice(&g);
                }
                self.accum(x, dx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[x].data.len();
                self.accum(x, vec![g[0]; n]);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x].data.len();
                self.accum(x, vec![g[0] / T::from_count(n); n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn add_and_mul_match_direct_evaluation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]), false);
        let b = tape.leaf(Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]), false);
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.data(s), &[5.0, 7.0, 9.0]);
        assert_eq!(tape.data(p), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[3, 2]), false);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::filled(&[2], 1.0), false);
        let b = tape.leaf(Tensor::from_vec(&[2], vec![2.0, 0.0]), false);
        assert_eq!(tape.div(a, b).unwrap_err(), AutodiffError::DivisionByZero);
        assert_eq!(tape.div_scalar(a, 0.0).unwrap_err(), AutodiffError::DivisionByZero);
    }

    #[test]
    fn matmul_with_identity_returns_input() {
        let mut rng = Rng::new(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[3, 3], &mut rng), false);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let e = tape.leaf(eye, false);
        let y = tape.matmul(x, e).unwrap();
        assert_eq!(tape.data(x), tape.data(y));
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[4, 5], &mut rng), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &vec![1.0; 20][..]);
    }

    #[test]
    fn backward_of_half_squared_norm_gives_x() {
        let mut rng = Rng::new(3);
        let mut tape = Tape::<f64>::new();
        let t = randn(&[6], &mut rng);
        let x = tape.leaf(t.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.mul_scalar(s, 0.5);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(t.data().iter()) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // loss = sum(x) + sum(x) -> grad = 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[3], 1.5), true);
        let s1 = tape.sum_all(x);
        let s2 = tape.sum_all(x);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2], 1.0), true);
        let orphan = tape.leaf(Tensor::filled(&[3], 1.0), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(orphan).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_leaf_never_receives_a_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2], 2.0), true);
        let c = tape.leaf(Tensor::filled(&[2], 3.0), false);
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2], 1.0), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), AutodiffError::DoubleBackward);
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[2, 2], 1.0), true);
        let y = tape.silu(x);
        let err = tape.backward(y).unwrap_err();
        assert_eq!(err, AutodiffError::NonScalarLoss { shape: vec![2, 2] });
    }

    #[test]
    fn softmax_non_finite_input_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![f32::NAN, 0.0]), false);
        assert_eq!(
            tape.softmax_rows(x).unwrap_err(),
            AutodiffError::NonFiniteInput { op: "softmax_rows" }
        );
    }

    #[test]
    fn strict_pool_rejects_enlargement_but_resize_allows_it() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::filled(&[1, 2, 2], 1.0), false);
        let err = tape.adaptive_avg_pool2d(x, 4, 4).unwrap_err();
        assert_eq!(err, AutodiffError::InvalidTargetSize { out: (4, 4), input: (2, 2) });
        let up = tape.resize_pool(x, 4, 4).unwrap();
        assert_eq!(tape.data(up), &vec![1.0; 16][..]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut rng = Rng::new(4);
        let mut tape = Tape::<f64>::new();
        let t = randn(&[5, 3], &mut rng);
        let x = tape.leaf(t.clone(), false);
        let top = tape.slice_rows(x, 0, 2).unwrap();
        let bottom = tape.slice_rows(x, 2, 5).unwrap();
        let back = tape.concat_rows(top, bottom).unwrap();
        assert_eq!(tape.data(back), t.data());
    }

    #[test]
    fn transpose_backward_routes_gradients_correctly() {
        // loss = sum(transpose(x) ⊙ w): d loss / dx = transpose(w).
        let mut rng = Rng::new(5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn(&[2, 3], &mut rng), true);
        let wt = randn(&[3, 2], &mut rng);
        let w = tape.leaf(wt.clone(), false);
        let xt = tape.transpose2d(x).unwrap();
        let prod = tape.mul(xt, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let expect = kernels::transpose(wt.data(), 3, 2);
        for (g, e) in tape.grad(x).unwrap().iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn replaying_the_same_graph_is_bitwise_deterministic() {
        let build = || {
            let mut rng = Rng::new(77);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::randn(&[4, 6], 1.0, &mut rng), true);
            let w = tape.leaf(Tensor::randn(&[6, 2], 1.0, &mut rng), true);
            let b = tape.leaf(Tensor::randn(&[2], 1.0, &mut rng), true);
            let y = tape.linear(x, w, b).unwrap();
            let act = tape.silu(y);
            let loss = tape.mean_all(act);
            tape.backward(loss).unwrap();
            let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            (
                bits(tape.data(loss)),
                bits(tape.grad(x).unwrap()),
                bits(tape.grad(w).unwrap()),
                bits(tape.grad(b).unwrap()),
            )
        };
        assert_eq!(build(), build());
    }
}
