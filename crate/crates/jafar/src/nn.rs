//! Architecture blocks: 2-D rotary position encoding, feature modulation of
//! keys, and the cross-attention kernel that drives the upsampling.
//!
//! Positions are always normalized to `(0,1)²` with half-pixel centers
//! (`(i+0.5)/H`), so query and key grids of different sizes live in one
//! shared coordinate frame and the kernel is resolution-agnostic.

use std::fmt;

use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{AdResult, AutodiffError, NodeId, Tape};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum NnError {
    InvalidHeadCount { d: usize, n_heads: usize },
    BadHeadDim { head_dim: usize },
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    Autodiff(AutodiffError),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::InvalidHeadCount { d, n_heads } => {
                write!(f, "channel count {d} is not divisible by {n_heads} heads")
            }
            NnError::BadHeadDim { head_dim } => {
                write!(f, "head dimension {head_dim} must be a positive multiple of 4")
            }
            NnError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            NnError::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<AutodiffError> for NnError {
    fn from(e: AutodiffError) -> Self {
        NnError::Autodiff(e)
    }
}

pub type NnResult<T> = Result<T, NnError>;

// ───────────────────────── rotary position encoding ─────────────────────────

/// Axial 2-D rotary encoding configuration.
///
/// The head dimension splits into quarters: feature pairs `(2t, 2t+1)` in the
/// first half of the pairs rotate by `row · base_freq^(−4t/head_dim)`, pairs
/// in the second half rotate by the column coordinate analogously.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base_freq: f64,
}

impl RopeConfig {
    pub const DEFAULT_BASE_FREQ: f64 = 100.0;

    pub fn new(head_dim: usize, base_freq: f64) -> NnResult<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(NnError::BadHeadDim { head_dim });
        }
        Ok(RopeConfig { head_dim, base_freq })
    }

    /// Rotation frequencies per axis (`head_dim/4` of them).
    pub fn frequencies(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 4)
            .map(|t| self.base_freq.powf(-4.0 * t as f64 / d))
            .collect()
    }

    /// The rotation angle of feature pair `t` at a normalized position.
    pub fn pair_angle(&self, t: usize, pos: (f64, f64)) -> f64 {
        let quarter = self.head_dim / 4;
        let freqs = self.frequencies();
        if t < quarter {
            pos.0 * freqs[t]
        } else {
            pos.1 * freqs[t - quarter]
        }
    }
}

/// Normalized half-pixel-center positions of an `h×w` grid, row-major.
pub fn grid_positions(h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64));
        }
    }
    out
}

/// Precomputed per-(token, pair) rotation tables.
#[derive(Clone, Debug)]
pub struct RopeAngles<T: Scalar> {
    pub n: usize,
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> RopeAngles<T> {
    pub fn for_positions(cfg: &RopeConfig, positions: &[(f64, f64)]) -> Self {
        let half = cfg.head_dim / 2;
        let quarter = cfg.head_dim / 4;
        let freqs = cfg.frequencies();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &(row, col) in positions {
            for t in 0..half {
                let angle = if t < quarter {
                    row * freqs[t]
                } else {
                    col * freqs[t - quarter]
                };
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        RopeAngles { n: positions.len(), half, cos, sin }
    }

    pub fn for_grid(cfg: &RopeConfig, h: usize, w: usize) -> Self {
        Self::for_positions(cfg, &grid_positions(h, w))
    }
}

/// Rotates every head of `x: n_heads×N×head_dim` by the positions' angles.
pub fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[(f64, f64)],
    cfg: &RopeConfig,
) -> NnResult<Tensor<T>> {
    let (heads, n, d) = match x.shape()[..] {
        [heads, n, d] => (heads, n, d),
        _ => {
            return Err(NnError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![0, positions.len(), cfg.head_dim],
            })
        }
    };
    if d != cfg.head_dim || n != positions.len() {
        return Err(NnError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: vec![heads, positions.len(), cfg.head_dim],
        });
    }
    let angles = RopeAngles::<T>::for_positions(cfg, positions);
    let mut out = Vec::with_capacity(x.numel());
    for h in 0..heads {
        let slice = &x.data()[h * n * d..(h + 1) * n * d];
        out.extend(kernels::rotate_pairs(slice, n, d, &angles.cos, &angles.sin, false));
    }
    Ok(Tensor::from_vec(x.shape(), out))
}

// ───────────────────────── key modulation ─────────────────────────

/// Modulates keys by per-location scale and shift: `γ ⊙ k + β`.
pub fn sft_modulate<T: Scalar>(
    k: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> NnResult<Tensor<T>> {
    if k.shape() != gamma.shape() || k.shape() != beta.shape() {
        return Err(NnError::ShapeMismatch {
            left: k.shape().to_vec(),
            right: if k.shape() != gamma.shape() {
                gamma.shape().to_vec()
            } else {
                beta.shape().to_vec()
            },
        });
    }
    let data = k
        .data()
        .iter()
        .zip(gamma.data().iter().zip(beta.data().iter()))
        .map(|(&kv, (&gv, &bv))| gv * kv + bv)
        .collect();
    Ok(Tensor::from_vec(k.shape(), data))
}

// ───────────────────────── attention kernel ─────────────────────────

/// Row-stochastic attention matrix from a query grid onto a key grid,
/// averaged over heads after the per-head softmax.
#[derive(Clone, Debug)]
pub struct AttentionKernel<T: Scalar> {
    pub q_h: usize,
    pub q_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub n_heads: usize,
    weights: Vec<T>,
}

impl<T: Scalar> AttentionKernel<T> {
    pub fn rows(&self) -> usize {
        self.q_h * self.q_w
    }

    pub fn cols(&self) -> usize {
        self.k_h * self.k_w
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn from_weights(
        q_h: usize,
        q_w: usize,
        k_h: usize,
        k_w: usize,
        n_heads: usize,
        weights: Vec<T>,
    ) -> Self {
        assert_eq!(weights.len(), q_h * q_w * k_h * k_w);
        AttentionKernel { q_h, q_w, k_h, k_w, n_heads, weights }
    }
}

/// Validates query/key channel layout against the head count and RoPE config.
fn check_heads(d: usize, n_heads: usize, cfg: &RopeConfig) -> NnResult<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NnError::InvalidHeadCount { d, n_heads });
    }
    let head_dim = d / n_heads;
    if head_dim % 4 != 0 || head_dim == 0 {
        return Err(NnError::BadHeadDim { head_dim });
    }
    if head_dim != cfg.head_dim {
        return Err(NnError::BadHeadDim { head_dim: cfg.head_dim });
    }
    Ok(head_dim)
}

/// Builds the attention kernel between position-encoded queries and keys.
///
/// `q: d×h_q×w_q`, `k: d×h_k×w_k`. Each head sees its own `head_dim` channel
/// block; per-head maps are averaged after the softmax, so the result stays
/// row-stochastic.
pub fn attention_kernel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    n_heads: usize,
    cfg: &RopeConfig,
) -> NnResult<AttentionKernel<T>> {
    let (dq, hq, wq) = rank3(q)?;
    let (dk, hk, wk) = rank3(k)?;
    if dq != dk {
        return Err(NnError::ShapeMismatch {
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    check_heads(dq, n_heads, cfg)?;
    let mut tape = Tape::<T>::new();
    let qid = tape.constant(Tensor::from_vec(&[dq, hq * wq], q.data().to_vec()));
    let kid = tape.constant(Tensor::from_vec(&[dk, hk * wk], k.data().to_vec()));
    let out = attention_on_tape(&mut tape, qid, kid, (hq, wq), (hk, wk), n_heads, cfg)?;
    Ok(AttentionKernel {
        q_h: hq,
        q_w: wq,
        k_h: hk,
        k_w: wk,
        n_heads,
        weights: tape.data(out).to_vec(),
    })
}

fn rank3<T: Scalar>(t: &Tensor<T>) -> NnResult<(usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NnError::ShapeMismatch { left: t.shape().to_vec(), right: vec![0, 0, 0] }),
    }
}

/// Differentiable attention kernel on an existing tape.
///
/// `q2d: [d, N_q]` and `k2d: [d, N_k]` are channel-major; the grid extents
/// only feed the position tables. Returns the `[N_q, N_k]` kernel node.
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q2d: NodeId,
    k2d: NodeId,
    q_grid: (usize, usize),
    k_grid: (usize, usize),
    n_heads: usize,
    cfg: &RopeConfig,
) -> AdResult<NodeId> {
    let d = tape.shape(q2d)[0];
    let head_dim = d / n_heads;
    let angles_q = RopeAngles::<T>::for_grid(cfg, q_grid.0, q_grid.1);
    let angles_k = RopeAngles::<T>::for_grid(cfg, k_grid.0, k_grid.1);
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut acc: Option<NodeId> = None;
    for h in 0..n_heads {
        let qh = tape.slice_rows(q2d, h * head_dim, (h + 1) * head_dim)?;
        let qh = tape.transpose2d(qh)?;
        let qh = tape.rope_rows(qh, &angles_q.cos, &angles_q.sin)?;
        let kh = tape.slice_rows(k2d, h * head_dim, (h + 1) * head_dim)?;
        let kh = tape.transpose2d(kh)?;
        let kh = tape.rope_rows(kh, &angles_k.cos, &angles_k.sin)?;
        let kh_t = tape.transpose2d(kh)?;
        let scores = tape.matmul(qh, kh_t)?;
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        acc = Some(match acc {
            None => attn,
            Some(prev) => tape.add(prev, attn)?,
        });
    }
    let summed = acc.expect("n_heads >= 1 validated by callers");
    Ok(tape.mul_scalar(summed, T::one() / T::from_count(n_heads)))
}

/// Interpolates low-resolution features with the kernel's rows.
///
/// A pure weighted average: output channels equal input channels, and every
/// output vector lies in the convex hull of the key-location vectors.
pub fn kernel_apply<T: Scalar>(
    a: &AttentionKernel<T>,
    f_lr: &FeatureMap<T>,
) -> NnResult<FeatureMap<T>> {
    if f_lr.h != a.k_h || f_lr.w != a.k_w {
        return Err(NnError::ShapeMismatch {
            left: vec![f_lr.c, f_lr.h, f_lr.w],
            right: vec![f_lr.c, a.k_h, a.k_w],
        });
    }
    let n_k = a.cols();
    let n_q = a.rows();
    // [C, N_k] -> [N_k, C], multiply, back to channel-major.
    let f_sm = kernels::transpose(f_lr.data(), f_lr.c, n_k);
    let out_sm = kernels::matmul_nn(&a.weights, &f_sm, n_q, n_k, f_lr.c);
    let out = kernels::transpose(&out_sm, n_q, f_lr.c);
    Ok(FeatureMap::from_vec(f_lr.c, a.q_h, a.q_w, out))
}
