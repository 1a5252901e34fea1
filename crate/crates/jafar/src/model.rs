//! The attention-based feature upsampler.
//!
//! A guidance image is encoded into a shared representation from which
//! queries (at the requested output grid) and keys (at the low-resolution
//! feature grid) are derived. Cross-attention between them builds a
//! row-stochastic kernel, and the output is that kernel applied to the
//! low-resolution features themselves — a content-adaptive weighted average,
//! so output channels always equal input channels and no value projection is
//! learned.
//!
//! Two execution paths share the same arithmetic kernels: a tape-based
//! differentiable forward for training, and a plain banded forward for
//! inference. Rows of the attention kernel are computed independently, so the
//! banded path produces bitwise-identical results for any band split and for
//! the tape path.

use std::error::Error;
use std::fmt;
use std::str::FromStr;

use crate::image::Image;
use crate::kernels;
use crate::nn::{self, NnError, RopeAngles, RopeConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{AutodiffError, NodeId, Tape};
use crate::tensor::{FeatureMap, SaliencyMap, Tensor};

// ───────────────────────── configuration ─────────────────────────

/// How attention keys are produced from the guidance encoding and the
/// low-resolution features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyStrategy {
    /// Spatially modulate encoded keys: `K = γ(F) ⊙ K̃ + β(F)`.
    Sft,
    /// Encoded keys only; low-resolution features enter the values alone.
    NoSft,
    /// Concatenate encoded keys with low-resolution features, then project.
    Concat,
    /// Project the low-resolution features directly; ignore the image branch.
    LinearProjection,
}

impl KeyStrategy {
    pub const ALL: [KeyStrategy; 4] =
        [KeyStrategy::Sft, KeyStrategy::NoSft, KeyStrategy::Concat, KeyStrategy::LinearProjection];
}

impl fmt::Display for KeyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            KeyStrategy::Sft => "sft",
            KeyStrategy::NoSft => "no_sft",
            KeyStrategy::Concat => "concat",
            KeyStrategy::LinearProjection => "linear_projection",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseKeyStrategyError {
    pub got: String,
}

impl fmt::Display for ParseKeyStrategyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown key strategy {:?}; expected sft, no_sft, concat or linear_projection",
            self.got
        )
    }
}

impl Error for ParseKeyStrategyError {}

impl FromStr for KeyStrategy {
    type Err = ParseKeyStrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(KeyStrategy::Sft),
            "no_sft" => Ok(KeyStrategy::NoSft),
            "concat" => Ok(KeyStrategy::Concat),
            "linear_projection" => Ok(KeyStrategy::LinearProjection),
            _ => Err(ParseKeyStrategyError { got: s.to_string() }),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Query/key embedding width.
    pub d: usize,
    pub n_heads: usize,
    /// Channel count of the feature maps being upsampled.
    pub c_in: usize,
    pub key_strategy: KeyStrategy,
    pub rope_base: f64,
}

impl ModelConfig {
    pub fn new(d: usize, n_heads: usize, c_in: usize, key_strategy: KeyStrategy) -> Self {
        ModelConfig { d, n_heads, c_in, key_strategy, rope_base: RopeConfig::DEFAULT_BASE_FREQ }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads.max(1)
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(ModelError::InvalidHeadCount { d: self.d, n_heads: self.n_heads });
        }
        if self.head_dim() % 4 != 0 || self.head_dim() == 0 {
            return Err(ModelError::BadHeadDim { head_dim: self.head_dim() });
        }
        if self.c_in == 0 {
            return Err(ModelError::ChannelMismatch { expected: 1, got: 0 });
        }
        Ok(())
    }

    pub fn rope(&self) -> ModelResult<RopeConfig> {
        self.validate()?;
        Ok(RopeConfig::new(self.head_dim(), self.rope_base)?)
    }
}

// ───────────────────────── errors ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    ChannelMismatch { expected: usize, got: usize },
    InvalidTargetSize { out_h: usize, out_w: usize },
    InvalidHeadCount { d: usize, n_heads: usize },
    BadHeadDim { head_dim: usize },
    QueryOutOfRange { query: (usize, usize), grid: (usize, usize) },
    InvalidTileRows,
    BadParameters { detail: String },
    Autodiff(AutodiffError),
    Nn(NnError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::ChannelMismatch { expected, got } => {
                write!(f, "feature map has {got} channels, the model expects {expected}")
            }
            ModelError::InvalidTargetSize { out_h, out_w } => {
                write!(f, "output grid {out_h}x{out_w} must be nonempty")
            }
            ModelError::InvalidHeadCount { d, n_heads } => {
                write!(f, "embedding width {d} is not divisible by {n_heads} heads")
            }
            ModelError::BadHeadDim { head_dim } => {
                write!(f, "per-head width {head_dim} must be a positive multiple of 4")
            }
            ModelError::QueryOutOfRange { query, grid } => {
                write!(
                    f,
                    "query ({}, {}) lies outside the {}x{} output grid",
                    query.0, query.1, grid.0, grid.1
                )
            }
            ModelError::InvalidTileRows => write!(f, "tile row count must be at least 1"),
            ModelError::BadParameters { detail } => write!(f, "bad parameter set: {detail}"),
            ModelError::Autodiff(e) => write!(f, "autodiff failure: {e}"),
            ModelError::Nn(e) => write!(f, "attention failure: {e}"),
        }
    }
}

impl Error for ModelError {}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Autodiff(e)
    }
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        ModelError::Nn(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

// ───────────────────────── parameters ─────────────────────────

/// A dense layer's weights: `w ∈ d_in×d_out`, `b ∈ d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// A 3×3 convolution's weights: `w ∈ c_out×c_in×3×3`, `b ∈ c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Strategy-specific key-head parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyHead<T: Scalar> {
    /// γ and β branches, each mapping `c_in → d` per key location.
    Sft { gamma: LinearParams<T>, beta: LinearParams<T> },
    /// No extra parameters: keys are the encoded keys directly.
    Plain,
    /// One projection onto `d` (input width depends on the strategy).
    Projection(LinearParams<T>),
}

fn he_linear<T: Scalar>(rng: &mut Rng, d_in: usize, d_out: usize) -> LinearParams<T> {
    LinearParams {
        w: Tensor::randn(&[d_in, d_out], (2.0 / d_in as f64).sqrt(), rng),
        b: Tensor::zeros(&[d_out]),
    }
}

fn he_conv<T: Scalar>(rng: &mut Rng, ci: usize, co: usize) -> ConvParams<T> {
    ConvParams {
        w: Tensor::randn(&[co, ci, 3, 3], (2.0 / (9 * ci) as f64).sqrt(), rng),
        b: Tensor::zeros(&[co]),
    }
}

/// The complete learnable state of one upsampler.
#[derive(Clone, Debug, PartialEq)]
pub struct JafarParams<T: Scalar> {
    pub cfg: ModelConfig,
    /// Per-pixel RGB lift, `3 → d`, no activation.
    pub w_in: LinearParams<T>,
    /// Two-stage image encoder (3×3 conv + SiLU each).
    pub enc1: ConvParams<T>,
    pub enc2: ConvParams<T>,
    /// Query branch (3×3 conv + SiLU) on the encoded image.
    pub q_enc: ConvParams<T>,
    /// Key branch on the pooled encoding; absent when keys skip the image.
    pub k_enc: Option<ConvParams<T>>,
    pub head: KeyHead<T>,
}

impl<T: Scalar> JafarParams<T> {
    /// Freshly initialized parameters: He-scaled weights, zero biases, and a
    /// γ-branch bias of one so modulation starts near the identity.
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> ModelResult<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let c = cfg.c_in;
        let w_in = he_linear(rng, 3, d);
        let enc1 = he_conv(rng, d, d);
        let enc2 = he_conv(rng, d, d);
        let q_enc = he_conv(rng, d, d);
        let k_enc = match cfg.key_strategy {
            KeyStrategy::LinearProjection => None,
            _ => Some(he_conv(rng, d, d)),
        };
        let head = match cfg.key_strategy {
            KeyStrategy::Sft => {
                let mut gamma = he_linear(rng, c, d);
                gamma.b = Tensor::filled(&[d], T::one());
                let beta = he_linear(rng, c, d);
                KeyHead::Sft { gamma, beta }
            }
            KeyStrategy::NoSft => KeyHead::Plain,
            KeyStrategy::Concat => KeyHead::Projection(he_linear(rng, d + c, d)),
            KeyStrategy::LinearProjection => KeyHead::Projection(he_linear(rng, c, d)),
        };
        Ok(JafarParams { cfg, w_in, enc1, enc2, q_enc, k_enc, head })
    }

    /// Tensors in their canonical (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("w_in.w".into(), &self.w_in.w),
            ("w_in.b".into(), &self.w_in.b),
            ("e_theta.0.w".into(), &self.enc1.w),
            ("e_theta.0.b".into(), &self.enc1.b),
            ("e_theta.1.w".into(), &self.enc2.w),
            ("e_theta.1.b".into(), &self.enc2.b),
            ("q_enc.w".into(), &self.q_enc.w),
            ("q_enc.b".into(), &self.q_enc.b),
        ];
        if let Some(k) = &self.k_enc {
            out.push(("k_enc.w".into(), &k.w));
            out.push(("k_enc.b".into(), &k.b));
        }
        match &self.head {
            KeyHead::Sft { gamma, beta } => {
                out.push(("sft.gamma.w".into(), &gamma.w));
                out.push(("sft.gamma.b".into(), &gamma.b));
                out.push(("sft.beta.w".into(), &beta.w));
                out.push(("sft.beta.b".into(), &beta.b));
            }
            KeyHead::Plain => {}
            KeyHead::Projection(p) => {
                out.push(("key_proj.w".into(), &p.w));
                out.push(("key_proj.b".into(), &p.b));
            }
        }
        out
    }

    /// Mutable view in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.w_in.w,
            &mut self.w_in.b,
            &mut self.enc1.w,
            &mut self.enc1.b,
            &mut self.enc2.w,
            &mut self.enc2.b,
            &mut self.q_enc.w,
            &mut self.q_enc.b,
        ];
        if let Some(k) = &mut self.k_enc {
            out.push(&mut k.w);
            out.push(&mut k.b);
        }
        match &mut self.head {
            KeyHead::Sft { gamma, beta } => {
                out.push(&mut gamma.w);
                out.push(&mut gamma.b);
                out.push(&mut beta.w);
                out.push(&mut beta.b);
            }
            KeyHead::Plain => {}
            KeyHead::Projection(p) => {
                out.push(&mut p.w);
                out.push(&mut p.b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds parameters from named tensors in canonical order, validating
    /// both names and shapes against the configuration.
    pub fn from_named(cfg: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> ModelResult<Self> {
        cfg.validate()?;
        let mut template = JafarParams::init(cfg.clone(), &mut Rng::new(0))?;
        let expected: Vec<(String, Vec<usize>)> = template
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(ModelError::BadParameters {
                detail: format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            });
        }
        for ((name, tensor), (want_name, want_shape)) in tensors.iter().zip(expected.iter()) {
            if name != want_name {
                return Err(ModelError::BadParameters {
                    detail: format!("expected tensor {want_name:?}, got {name:?}"),
                });
            }
            if tensor.shape() != &want_shape[..] {
                return Err(ModelError::BadParameters {
                    detail: format!(
                        "tensor {name:?} has shape {:?}, expected {want_shape:?}",
                        tensor.shape()
                    ),
                });
            }
        }
        for (dst, (_, src)) in template.tensors_mut().into_iter().zip(tensors.into_iter()) {
            *dst = src;
        }
        Ok(template)
    }

    pub fn cast<U: Scalar>(&self) -> JafarParams<U> {
        let conv = |c: &ConvParams<T>| ConvParams { w: c.w.cast(), b: c.b.cast() };
        let lin = |l: &LinearParams<T>| LinearParams { w: l.w.cast(), b: l.b.cast() };
        JafarParams {
            cfg: self.cfg.clone(),
            w_in: lin(&self.w_in),
            enc1: conv(&self.enc1),
            enc2: conv(&self.enc2),
            q_enc: conv(&self.q_enc),
            k_enc: self.k_enc.as_ref().map(conv),
            head: match &self.head {
                KeyHead::Sft { gamma, beta } => {
                    KeyHead::Sft { gamma: lin(gamma), beta: lin(beta) }
                }
                KeyHead::Plain => KeyHead::Plain,
                KeyHead::Projection(p) => KeyHead::Projection(lin(p)),
            },
        }
    }

    /// Registers every tensor as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamIds {
        let named = self.named_tensors();
        let ids: Vec<NodeId> =
            named.iter().map(|(_, t)| tape.leaf((*t).clone(), true)).collect();
        ParamIds::from_ordered(&self.cfg, &ids).expect("own tensors always map cleanly")
    }
}

/// Tape node ids of registered parameters, in canonical order.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub w_in: (NodeId, NodeId),
    pub enc1: (NodeId, NodeId),
    pub enc2: (NodeId, NodeId),
    pub q_enc: (NodeId, NodeId),
    pub k_enc: Option<(NodeId, NodeId)>,
    pub head: HeadIds,
    pub ordered: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub enum HeadIds {
    Sft { gamma: (NodeId, NodeId), beta: (NodeId, NodeId) },
    Plain,
    Projection((NodeId, NodeId)),
}

/// Tensor count for one configuration's canonical parameter list.
pub fn tensor_count(strategy: KeyStrategy) -> usize {
    match strategy {
        KeyStrategy::Sft => 14,
        KeyStrategy::NoSft => 10,
        KeyStrategy::Concat => 12,
        KeyStrategy::LinearProjection => 10,
    }
}

impl ParamIds {
    /// Interprets a flat id list laid out in canonical order.
    pub fn from_ordered(cfg: &ModelConfig, ids: &[NodeId]) -> ModelResult<Self> {
        let want = tensor_count(cfg.key_strategy);
        if ids.len() != want {
            return Err(ModelError::BadParameters {
                detail: format!("expected {want} parameter tensors, got {}", ids.len()),
            });
        }
        let pair = |i: usize| (ids[2 * i], ids[2 * i + 1]);
        let (k_enc, head_base) = match cfg.key_strategy {
            KeyStrategy::LinearProjection => (None, 4),
            _ => (Some(pair(4)), 5),
        };
        let head = match cfg.key_strategy {
            KeyStrategy::Sft => {
                HeadIds::Sft { gamma: pair(head_base), beta: pair(head_base + 1) }
            }
            KeyStrategy::NoSft => HeadIds::Plain,
            KeyStrategy::Concat | KeyStrategy::LinearProjection => {
                HeadIds::Projection(pair(head_base))
            }
        };
        Ok(ParamIds {
            w_in: pair(0),
            enc1: pair(1),
            enc2: pair(2),
            q_enc: pair(3),
            k_enc,
            head,
            ordered: ids.to_vec(),
        })
    }
}

// ───────────────────────── shared geometry checks ─────────────────────────

/// One upsampling request: guidance image, features to upsample, target grid.
#[derive(Clone, Copy, Debug)]
pub struct UpsampleRequest<'a, T: Scalar> {
    pub guidance: &'a Image<T>,
    pub f_lr: &'a FeatureMap<T>,
    pub out_h: usize,
    pub out_w: usize,
}

fn check_request<T: Scalar>(cfg: &ModelConfig, req: &UpsampleRequest<'_, T>) -> ModelResult<()> {
    cfg.validate()?;
    if req.f_lr.c != cfg.c_in {
        return Err(ModelError::ChannelMismatch { expected: cfg.c_in, got: req.f_lr.c });
    }
    if req.out_h == 0 || req.out_w == 0 {
        return Err(ModelError::InvalidTargetSize { out_h: req.out_h, out_w: req.out_w });
    }
    if req.guidance.h == 0 || req.guidance.w == 0 {
        return Err(ModelError::InvalidTargetSize { out_h: req.guidance.h, out_w: req.guidance.w });
    }
    Ok(())
}

// ───────────────────────── differentiable forward ─────────────────────────

/// Full differentiable forward pass on a tape.
///
/// Returns the `[c_in, out_h·out_w]` upsampled-feature node. Guidance and
/// low-resolution features enter as constants; parameters are the tape leaves
/// in `ids`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    ids: &ParamIds,
    req: &UpsampleRequest<'_, T>,
) -> ModelResult<NodeId> {
    check_request(cfg, req)?;
    let d = cfg.d;
    let (gh, gw) = (req.guidance.h, req.guidance.w);
    let n_g = gh * gw;
    let (kh, kw) = (req.f_lr.h, req.f_lr.w);
    let n_k = kh * kw;
    let rope = cfg.rope()?;

    // Guidance encoding: per-pixel lift, then two conv+SiLU stages.
    let img = tape.constant(Tensor::from_vec(&[3, n_g], req.guidance.data().to_vec()));
    let px = tape.transpose2d(img)?;
    let px = tape.linear(px, ids.w_in.0, ids.w_in.1)?;
    let trunk2d = tape.transpose2d(px)?;
    let trunk = tape.reshape(trunk2d, &[d, gh, gw])?;
    let trunk = tape.conv2d(trunk, ids.enc1.0, ids.enc1.1)?;
    let trunk = tape.silu(trunk);
    let trunk = tape.conv2d(trunk, ids.enc2.0, ids.enc2.1)?;
    let trunk = tape.silu(trunk);

    // Queries: query branch at guidance resolution, pooled onto the output grid.
    let q = tape.conv2d(trunk, ids.q_enc.0, ids.q_enc.1)?;
    let q = tape.silu(q);
    let q = tape.resize_pool(q, req.out_h, req.out_w)?;
    let q2d = tape.reshape(q, &[d, req.out_h * req.out_w])?;

    // Low-resolution features, channel-major and spatial-major views.
    let f2d = tape.constant(Tensor::from_vec(&[cfg.c_in, n_k], req.f_lr.data().to_vec()));
    let f_sm = tape.transpose2d(f2d)?;

    // Keys at the low-resolution grid.
    let k2d = match cfg.key_strategy {
        KeyStrategy::LinearProjection => {
            let p = match &ids.head {
                HeadIds::Projection(p) => *p,
                _ => unreachable!("strategy fixes the head layout"),
            };
            let k_sm = tape.linear(f_sm, p.0, p.1)?;
            tape.transpose2d(k_sm)?
        }
        strategy => {
            let ke = ids.k_enc.expect("strategy fixes the head layout");
            let kb = tape.resize_pool(trunk, kh, kw)?;
            let kb = tape.conv2d(kb, ke.0, ke.1)?;
            let kb = tape.silu(kb);
            let kb2d = tape.reshape(kb, &[d, n_k])?;
            match (strategy, &ids.head) {
                (KeyStrategy::NoSft, _) => kb2d,
                (KeyStrategy::Sft, HeadIds::Sft { gamma, beta }) => {
                    let g = tape.linear(f_sm, gamma.0, gamma.1)?;
                    let b = tape.linear(f_sm, beta.0, beta.1)?;
                    let k_sm = tape.transpose2d(kb2d)?;
                    let k_sm = tape.mul(g, k_sm)?;
                    let k_sm = tape.add(k_sm, b)?;
                    tape.transpose2d(k_sm)?
                }
                (KeyStrategy::Concat, HeadIds::Projection(p)) => {
                    let cat = tape.concat_rows(kb2d, f2d)?;
                    let cat_sm = tape.transpose2d(cat)?;
                    let k_sm = tape.linear(cat_sm, p.0, p.1)?;
                    tape.transpose2d(k_sm)?
                }
                _ => unreachable!("strategy fixes the head layout"),
            }
        }
    };

    // Attention kernel and feature interpolation.
    let attn =
        nn::attention_on_tape(tape, q2d, k2d, (req.out_h, req.out_w), (kh, kw), cfg.n_heads, &rope)?;
    let out_sm = tape.matmul(attn, f_sm)?;
    Ok(tape.transpose2d(out_sm)?)
}

// ───────────────────────── plain inference ─────────────────────────

/// Everything bands share: pooled queries, finished keys, value matrix.
struct Precomputed<T: Scalar> {
    /// `[d, N_q]` channel-major pooled queries (not yet rotated).
    q2d: Vec<T>,
    /// Per head: `[head_dim, N_k]` rotated keys, transposed for the score matmul.
    key_t_per_head: Vec<Vec<T>>,
    /// `[N_k, c]` spatial-major values.
    f_sm: Vec<T>,
    angles_q: RopeAngles<T>,
    n_q: usize,
    n_k: usize,
}

fn precompute<T: Scalar>(
    p: &JafarParams<T>,
    req: &UpsampleRequest<'_, T>,
) -> ModelResult<Precomputed<T>> {
    check_request(&p.cfg, req)?;
    let cfg = &p.cfg;
    let d = cfg.d;
    let (gh, gw) = (req.guidance.h, req.guidance.w);
    let n_g = gh * gw;
    let (kh, kw) = (req.f_lr.h, req.f_lr.w);
    let n_k = kh * kw;
    let n_q = req.out_h * req.out_w;
    let rope = cfg.rope()?;
    let head_dim = cfg.head_dim();

    let px = kernels::transpose(req.guidance.data(), 3, n_g);
    let px = kernels::linear_forward(&px, p.w_in.w.data(), p.w_in.b.data(), n_g, 3, d);
    let trunk = kernels::transpose(&px, n_g, d);
    let trunk = kernels::conv3x3_forward(&trunk, p.enc1.w.data(), p.enc1.b.data(), d, gh, gw, d);
    let trunk = kernels::silu_slice(&trunk);
    let trunk = kernels::conv3x3_forward(&trunk, p.enc2.w.data(), p.enc2.b.data(), d, gh, gw, d);
    let trunk = kernels::silu_slice(&trunk);

    let q = kernels::conv3x3_forward(&trunk, p.q_enc.w.data(), p.q_enc.b.data(), d, gh, gw, d);
    let q = kernels::silu_slice(&q);
    let q2d = kernels::pool_general(&q, d, gh, gw, req.out_h, req.out_w);

    let f_sm = kernels::transpose(req.f_lr.data(), cfg.c_in, n_k);

    let k2d = match (cfg.key_strategy, &p.head, &p.k_enc) {
        (KeyStrategy::LinearProjection, KeyHead::Projection(proj), None) => {
            let k_sm =
                kernels::linear_forward(&f_sm, proj.w.data(), proj.b.data(), n_k, cfg.c_in, d);
            kernels::transpose(&k_sm, n_k, d)
        }
        (strategy, head, Some(ke)) => {
            let kb = kernels::pool_general(&trunk, d, gh, gw, kh, kw);
            let kb = kernels::conv3x3_forward(&kb, ke.w.data(), ke.b.data(), d, kh, kw, d);
            let kb2d = kernels::silu_slice(&kb);
            match (strategy, head) {
                (KeyStrategy::NoSft, KeyHead::Plain) => kb2d,
                (KeyStrategy::Sft, KeyHead::Sft { gamma, beta }) => {
                    let g = kernels::linear_forward(
                        &f_sm,
                        gamma.w.data(),
                        gamma.b.data(),
                        n_k,
                        cfg.c_in,
                        d,
                    );
                    let b = kernels::linear_forward(
                        &f_sm,
                        beta.w.data(),
                        beta.b.data(),
                        n_k,
                        cfg.c_in,
                        d,
                    );
                    let k_sm = kernels::transpose(&kb2d, d, n_k);
                    let mut mod_sm = vec![T::zero(); n_k * d];
                    for i in 0..n_k * d {
                        mod_sm[i] = g[i] * k_sm[i] + b[i];
                    }
                    kernels::transpose(&mod_sm, n_k, d)
                }
                (KeyStrategy::Concat, KeyHead::Projection(proj)) => {
                    let mut cat = Vec::with_capacity((d + cfg.c_in) * n_k);
                    cat.extend_from_slice(&kb2d);
                    cat.extend_from_slice(req.f_lr.data());
                    let cat_sm = kernels::transpose(&cat, d + cfg.c_in, n_k);
                    let k_sm = kernels::linear_forward(
                        &cat_sm,
                        proj.w.data(),
                        proj.b.data(),
                        n_k,
                        d + cfg.c_in,
                        d,
                    );
                    kernels::transpose(&k_sm, n_k, d)
                }
                _ => {
                    return Err(ModelError::BadParameters {
                        detail: "head parameters do not match the key strategy".into(),
                    })
                }
            }
        }
        _ => {
            return Err(ModelError::BadParameters {
                detail: "head parameters do not match the key strategy".into(),
            })
        }
    };

    let angles_q = RopeAngles::<T>::for_grid(&rope, req.out_h, req.out_w);
    let angles_k = RopeAngles::<T>::for_grid(&rope, kh, kw);
    let mut key_t_per_head = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let block = &k2d[h * head_dim * n_k..(h + 1) * head_dim * n_k];
        let kh_sm = kernels::transpose(block, head_dim, n_k);
        let kh_rot = kernels::rotate_pairs(&kh_sm, n_k, head_dim, &angles_k.cos, &angles_k.sin, false);
        key_t_per_head.push(kernels::transpose(&kh_rot, n_k, head_dim));
    }

    Ok(Precomputed { q2d, key_t_per_head, f_sm, angles_q, n_q, n_k })
}

/// Attention rows for queries `[r0, r1)`, averaged over heads: `[r1−r0, N_k]`.
fn attention_band<T: Scalar>(
    p: &JafarParams<T>,
    pre: &Precomputed<T>,
    r0: usize,
    r1: usize,
) -> ModelResult<Vec<T>> {
    let head_dim = p.cfg.head_dim();
    let half = head_dim / 2;
    let rows = r1 - r0;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let inv_heads = T::one() / T::from_count(p.cfg.n_heads);
    let cos = &pre.angles_q.cos[r0 * half..r1 * half];
    let sin = &pre.angles_q.sin[r0 * half..r1 * half];
    let mut acc: Option<Vec<T>> = None;
    for h in 0..p.cfg.n_heads {
        // Rows r0..r1 of this head's spatial-major queries.
        let mut qh = vec![T::zero(); rows * head_dim];
        for r in 0..rows {
            for c in 0..head_dim {
                qh[r * head_dim + c] = pre.q2d[(h * head_dim + c) * pre.n_q + r0 + r];
            }
        }
        let qh = kernels::rotate_pairs(&qh, rows, head_dim, cos, sin, false);
        let mut scores = kernels::matmul_nn(&qh, &pre.key_t_per_head[h], rows, head_dim, pre.n_k);
        for v in scores.iter_mut() {
            *v = scale * *v + T::zero();
        }
        let attn = kernels::softmax_rows(&scores, rows, pre.n_k)
            .ok_or(ModelError::Autodiff(AutodiffError::NonFiniteInput { op: "softmax_rows" }))?;
        acc = Some(match acc {
            None => attn,
            Some(mut prev) => {
                for (d, s) in prev.iter_mut().zip(attn.iter()) {
                    *d = *d + *s;
                }
                prev
            }
        });
    }
    let mut mean = acc.expect("head count validated");
    for v in mean.iter_mut() {
        *v = inv_heads * *v + T::zero();
    }
    Ok(mean)
}

impl<T: Scalar> JafarParams<T> {
    /// Upsamples features onto `out_h×out_w` in one pass.
    pub fn upsample(&self, req: &UpsampleRequest<'_, T>) -> ModelResult<FeatureMap<T>> {
        self.upsample_tiled(req, req.out_h.max(1))
    }

    /// Upsamples in horizontal bands of at most `tile_rows` output rows.
    ///
    /// Attention rows are independent, so any band split yields exactly the
    /// same bits as the monolithic pass while bounding peak memory.
    pub fn upsample_tiled(
        &self,
        req: &UpsampleRequest<'_, T>,
        tile_rows: usize,
    ) -> ModelResult<FeatureMap<T>> {
        if tile_rows == 0 {
            return Err(ModelError::InvalidTileRows);
        }
        let pre = precompute(self, req)?;
        let c = self.cfg.c_in;
        let mut out = vec![T::zero(); c * pre.n_q];
        let mut row = 0;
        while row < req.out_h {
            let rows = tile_rows.min(req.out_h - row);
            let r0 = row * req.out_w;
            let r1 = (row + rows) * req.out_w;
            let attn = attention_band(self, &pre, r0, r1)?;
            let band_sm = kernels::matmul_nn(&attn, &pre.f_sm, r1 - r0, pre.n_k, c);
            for (q, vals) in band_sm.chunks_exact(c).enumerate() {
                for (ch, &v) in vals.iter().enumerate() {
                    out[ch * pre.n_q + r0 + q] = v;
                }
            }
            row += rows;
        }
        Ok(FeatureMap::from_vec(c, req.out_h, req.out_w, out))
    }

    /// The attention weights one output-grid query assigns to every
    /// low-resolution location, as a `f_lr.h×f_lr.w` map summing to one.
    pub fn export_attention_row(
        &self,
        req: &UpsampleRequest<'_, T>,
        query: (usize, usize),
    ) -> ModelResult<SaliencyMap<T>> {
        if query.0 >= req.out_h || query.1 >= req.out_w {
            return Err(ModelError::QueryOutOfRange { query, grid: (req.out_h, req.out_w) });
        }
        let pre = precompute(self, req)?;
        let idx = query.0 * req.out_w + query.1;
        let row = attention_band(self, &pre, idx, idx + 1)?;
        Ok(SaliencyMap::from_vec(req.f_lr.h, req.f_lr.w, row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(strategy: KeyStrategy) -> ModelConfig {
        ModelConfig::new(8, 2, 3, strategy)
    }

    fn toy_inputs(seed: u64, gh: usize, kh: usize, c: usize) -> (Image<f32>, FeatureMap<f32>) {
        let mut rng = Rng::new(seed);
        let guidance = crate::image::synth_image::<f32>(&mut rng, gh);
        let f = Tensor::<f32>::randn(&[c, kh, kh], 1.0, &mut rng);
        (guidance, FeatureMap::from_tensor(&f))
    }

    #[test]
    fn parameter_counts_match_hand_tallies() {
        let mut rng = Rng::new(0);
        let count = |s| {
            JafarParams::<f32>::init(ModelConfig::new(64, 4, 32, s), &mut Rng::new(0))
                .unwrap()
                .param_count()
        };
        // linear 3→64 (256) + three 64→64 convs (36 928 each) + key-branch
        // conv + strategy head.
        assert_eq!(count(KeyStrategy::Sft), 256 + 4 * 36928 + 2 * (32 * 64 + 64));
        assert_eq!(count(KeyStrategy::Sft), 152_192);
        assert_eq!(count(KeyStrategy::NoSft), 256 + 4 * 36928);
        assert_eq!(count(KeyStrategy::Concat), 256 + 4 * 36928 + 96 * 64 + 64);
        assert_eq!(count(KeyStrategy::LinearProjection), 256 + 3 * 36928 + 32 * 64 + 64);
        let p = JafarParams::<f32>::init(ModelConfig::new(64, 4, 32, KeyStrategy::Sft), &mut rng)
            .unwrap();
        assert_eq!(p.named_tensors().len(), tensor_count(KeyStrategy::Sft));
    }

    #[test]
    fn gamma_bias_starts_at_one_and_other_biases_at_zero() {
        let p = JafarParams::<f32>::init(small_cfg(KeyStrategy::Sft), &mut Rng::new(3)).unwrap();
        match &p.head {
            KeyHead::Sft { gamma, beta } => {
                assert!(gamma.b.data().iter().all(|&v| v == 1.0));
                assert!(beta.b.data().iter().all(|&v| v == 0.0));
            }
            _ => panic!("sft config must build an sft head"),
        }
        assert!(p.enc1.b.data().iter().all(|&v| v == 0.0));
        assert!(p.w_in.b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        assert!(matches!(
            ModelConfig::new(10, 3, 4, KeyStrategy::Sft).validate(),
            Err(ModelError::InvalidHeadCount { d: 10, n_heads: 3 })
        ));
        assert!(matches!(
            ModelConfig::new(12, 2, 4, KeyStrategy::Sft).validate(),
            Err(ModelError::BadHeadDim { head_dim: 6 })
        ));
        assert!(ModelConfig::new(8, 2, 4, KeyStrategy::Sft).validate().is_ok());
    }

    #[test]
    fn upsample_rejects_wrong_channel_counts_and_empty_targets() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(0)).unwrap();
        let (guidance, f_lr) = toy_inputs(1, 8, 2, 5);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 4, out_w: 4 };
        assert!(matches!(
            p.upsample(&req),
            Err(ModelError::ChannelMismatch { expected: 3, got: 5 })
        ));
        let (guidance, f_lr) = toy_inputs(1, 8, 2, 3);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 0, out_w: 4 };
        assert!(matches!(p.upsample(&req), Err(ModelError::InvalidTargetSize { .. })));
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 4, out_w: 4 };
        assert!(matches!(p.upsample_tiled(&req, 0), Err(ModelError::InvalidTileRows)));
        assert!(matches!(
            p.export_attention_row(&req, (4, 0)),
            Err(ModelError::QueryOutOfRange { .. })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_inference_bitwise() {
        for strategy in KeyStrategy::ALL {
            let cfg = small_cfg(strategy);
            let p = JafarParams::<f32>::init(cfg.clone(), &mut Rng::new(5)).unwrap();
            let (guidance, f_lr) = toy_inputs(2, 8, 3, 3);
            let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 6, out_w: 5 };
            let plain = p.upsample(&req).unwrap();
            let mut tape = Tape::new();
            let ids = p.register(&mut tape);
            let out = forward_on_tape(&mut tape, &cfg, &ids, &req).unwrap();
            assert_eq!(tape.shape(out), &[3, 30]);
            assert_eq!(tape.data(out), plain.data(), "strategy {strategy}");
        }
    }

    #[test]
    fn any_band_split_reproduces_the_monolithic_pass_bitwise() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(9)).unwrap();
        let (guidance, f_lr) = toy_inputs(3, 8, 2, 3);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 7, out_w: 5 };
        let whole = p.upsample(&req).unwrap();
        for tile_rows in [1, 2, 3, 4, 6, 7, 50] {
            let tiled = p.upsample_tiled(&req, tile_rows).unwrap();
            assert_eq!(whole.data(), tiled.data(), "tile_rows {tile_rows}");
        }
    }

    #[test]
    fn exported_attention_rows_are_the_kernel_rows() {
        // With one-hot feature channels the upsampled vector at a query IS
        // that query's attention row, so the export can be cross-checked
        // bitwise against the full forward pass.
        let cfg = ModelConfig::new(8, 2, 4, KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(6);
        let guidance = crate::image::synth_image::<f32>(&mut rng, 8);
        let mut one_hot = vec![0.0f32; 4 * 4];
        for i in 0..4 {
            one_hot[i * 4 + i] = 1.0;
        }
        let f_lr = FeatureMap::from_vec(4, 2, 2, one_hot);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 4, out_w: 4 };
        let up = p.upsample(&req).unwrap();
        for (qy, qx) in [(0, 0), (1, 3), (3, 2)] {
            let row = p.export_attention_row(&req, (qy, qx)).unwrap();
            let sum: f32 = row.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "row must stay stochastic, got {sum}");
            for k in 0..4 {
                assert_eq!(row.data()[k], up.at(k, qy, qx), "query ({qy},{qx}) weight {k}");
            }
        }
    }

    #[test]
    fn constant_features_upsample_to_the_same_constant() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(12)).unwrap();
        let mut rng = Rng::new(13);
        let guidance = crate::image::synth_image::<f32>(&mut rng, 16);
        let mut f = FeatureMap::zeros(3, 3, 3);
        for c in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    f.set(c, y, x, 0.5 + c as f32);
                }
            }
        }
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f, out_h: 9, out_w: 9 };
        let up = p.upsample(&req).unwrap();
        for c in 0..3 {
            for v in up.plane(c) {
                assert!((v - (0.5 + c as f32)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn a_single_key_location_is_copied_exactly() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(21)).unwrap();
        let mut rng = Rng::new(22);
        let guidance = crate::image::synth_image::<f32>(&mut rng, 8);
        let f = FeatureMap::from_vec(3, 1, 1, vec![0.25, -1.5, 3.0]);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f, out_h: 5, out_w: 4 };
        let up = p.upsample(&req).unwrap();
        for c in 0..3 {
            for &v in up.plane(c) {
                assert_eq!(v, f.at(c, 0, 0));
            }
        }
    }

    #[test]
    fn identity_modulation_reduces_sft_to_plain_keys() {
        // Same seed gives both strategies identical trunk weights; forcing
        // γ=1, β=0 must then reproduce the unmodulated model bitwise.
        let mut sft =
            JafarParams::<f32>::init(small_cfg(KeyStrategy::Sft), &mut Rng::new(31)).unwrap();
        let plain =
            JafarParams::<f32>::init(small_cfg(KeyStrategy::NoSft), &mut Rng::new(31)).unwrap();
        match &mut sft.head {
            KeyHead::Sft { gamma, beta } => {
                gamma.w = Tensor::zeros(gamma.w.shape());
                gamma.b = Tensor::filled(gamma.b.shape(), 1.0);
                beta.w = Tensor::zeros(beta.w.shape());
                beta.b = Tensor::zeros(beta.b.shape());
            }
            _ => unreachable!(),
        }
        let (guidance, f_lr) = toy_inputs(33, 8, 2, 3);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 6, out_w: 6 };
        let a = sft.upsample(&req).unwrap();
        let b = plain.upsample(&req).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn named_round_trip_rebuilds_identical_parameters() {
        for strategy in KeyStrategy::ALL {
            let cfg = small_cfg(strategy);
            let p = JafarParams::<f32>::init(cfg.clone(), &mut Rng::new(41)).unwrap();
            let named: Vec<(String, Tensor<f32>)> =
                p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            let rebuilt = JafarParams::from_named(cfg, named).unwrap();
            assert_eq!(p, rebuilt, "strategy {strategy}");
        }
    }

    #[test]
    fn from_named_rejects_misnamed_or_misshaped_tensors() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg.clone(), &mut Rng::new(51)).unwrap();
        let mut named: Vec<(String, Tensor<f32>)> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.swap(0, 2);
        assert!(matches!(
            JafarParams::from_named(cfg.clone(), named.clone()),
            Err(ModelError::BadParameters { .. })
        ));
        named.swap(0, 2);
        named[3].1 = Tensor::zeros(&[7]);
        assert!(matches!(
            JafarParams::from_named(cfg.clone(), named.clone()),
            Err(ModelError::BadParameters { .. })
        ));
        named.truncate(5);
        assert!(matches!(
            JafarParams::from_named(cfg, named),
            Err(ModelError::BadParameters { .. })
        ));
    }

    #[test]
    fn key_strategy_names_round_trip() {
        for s in KeyStrategy::ALL {
            assert_eq!(s.to_string().parse::<KeyStrategy>().unwrap(), s);
        }
        let err = "softmax".parse::<KeyStrategy>().unwrap_err();
        assert!(err.to_string().contains("softmax"));
    }

    #[test]
    fn upsampling_supports_output_grids_beyond_the_guidance_grid() {
        let cfg = small_cfg(KeyStrategy::Sft);
        let p = JafarParams::<f32>::init(cfg, &mut Rng::new(61)).unwrap();
        let (guidance, f_lr) = toy_inputs(62, 8, 2, 3);
        let req = UpsampleRequest { guidance: &guidance, f_lr: &f_lr, out_h: 16, out_w: 12 };
        let up = p.upsample(&req).unwrap();
        assert_eq!((up.c, up.h, up.w), (3, 16, 12));
        assert!(up.data().iter().all(|v| v.is_finite()));
    }
}
