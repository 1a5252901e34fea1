//! Annotation-free multi-resolution training.
//!
//! Each sample renders one procedural scene at high resolution, encodes it
//! into the target features, then encodes a downsampled copy (side length
//! drawn from a small set, so the upsampling factor varies between 2× and 4×)
//! into the low-resolution input. The mid-resolution guidance image is a
//! resized copy of the same render — no labels anywhere. The objective is
//! cosine distance plus the mean per-location Euclidean distance, optimized
//! with AdamW on per-sample tapes. One seed fixes the whole run, and a rerun
//! with the same seed reproduces every parameter bit.

use std::error::Error;
use std::fmt;

use crate::encoder::{EncoderError, StubEncoder};
use crate::gradcheck::Objective;
use crate::image::{image_resize, synth_image, Image, ResizeMode};
use crate::model::{
    forward_on_tape, JafarParams, KeyStrategy, ModelConfig, ModelError, ParamIds, UpsampleRequest,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{AdResult, AutodiffError, NodeId, Tape};
use crate::tensor::{FeatureMap, Tensor};

/// Steps between progress events.
pub const LOG_EVERY: usize = 50;

// ───────────────────────── configuration ─────────────────────────

/// Optimization and data-sampling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Side length of the high-resolution render that defines the targets.
    pub hr_size: usize,
    /// Side length the guidance image is resized to.
    pub guidance_size: usize,
    /// Candidate side lengths for the low-resolution input image.
    pub delta_set: Vec<usize>,
    pub seed: u64,
    /// Emit intermediate checkpoints every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 2e-4,
            batch: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            hr_size: 64,
            guidance_size: 32,
            delta_set: vec![32, 24, 16],
            seed: 42,
            checkpoint_every: 0,
        }
    }
}

/// Everything one training run needs: optimization settings, architecture,
/// and the frozen encoder's geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub patch: usize,
    pub encoder_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::new(64, 4, 32, KeyStrategy::Sft),
            patch: 4,
            encoder_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Malformed { line: usize, detail: String },
    UnknownKey { key: String },
    DuplicateKey { key: String },
    InvalidValue { key: String, detail: String },
    Constraint { detail: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Malformed { line, detail } => {
                write!(f, "config line {line}: {detail}")
            }
            ConfigError::UnknownKey { key } => write!(f, "unknown config key {key:?}"),
            ConfigError::DuplicateKey { key } => write!(f, "duplicate config key {key:?}"),
            ConfigError::InvalidValue { key, detail } => {
                write!(f, "bad value for {key:?}: {detail}")
            }
            ConfigError::Constraint { detail } => write!(f, "invalid configuration: {detail}"),
        }
    }
}

impl Error for ConfigError {}

fn parse_as<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse::<V>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        detail: format!("{e}"),
    })
}

impl RunConfig {
    /// Parses `key = value` lines (`#` comments allowed). Unknown and
    /// duplicate keys are hard errors; unmentioned keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                detail: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey { key: key.to_string() });
            }
            seen.push(key.to_string());
            match key {
                "steps" => cfg.train.steps = parse_as(key, value)?,
                "lr" => cfg.train.lr = parse_as(key, value)?,
                "batch" => cfg.train.batch = parse_as(key, value)?,
                "beta1" => cfg.train.beta1 = parse_as(key, value)?,
                "beta2" => cfg.train.beta2 = parse_as(key, value)?,
                "eps" => cfg.train.eps = parse_as(key, value)?,
                "weight_decay" => cfg.train.weight_decay = parse_as(key, value)?,
                "hr_size" => cfg.train.hr_size = parse_as(key, value)?,
                "guidance_size" => cfg.train.guidance_size = parse_as(key, value)?,
                "delta_set" => {
                    let mut set = Vec::new();
                    for part in value.split(',') {
                        set.push(parse_as(key, part.trim())?);
                    }
                    cfg.train.delta_set = set;
                }
                "seed" => cfg.train.seed = parse_as(key, value)?,
                "checkpoint_every" => cfg.train.checkpoint_every = parse_as(key, value)?,
                "d" => cfg.model.d = parse_as(key, value)?,
                "n_heads" => cfg.model.n_heads = parse_as(key, value)?,
                "key_strategy" => cfg.model.key_strategy = parse_as(key, value)?,
                "rope_base" => cfg.model.rope_base = parse_as(key, value)?,
                "c_out" => cfg.model.c_in = parse_as(key, value)?,
                "patch" => cfg.patch = parse_as(key, value)?,
                "encoder_seed" => cfg.encoder_seed = parse_as(key, value)?,
                _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every setting; `parse` on the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let deltas: Vec<String> = t.delta_set.iter().map(|d| d.to_string()).collect();
        format!(
            "steps = {}\nlr = {}\nbatch = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\n\
             weight_decay = {}\nhr_size = {}\nguidance_size = {}\ndelta_set = {}\n\
             seed = {}\ncheckpoint_every = {}\nd = {}\nn_heads = {}\nkey_strategy = {}\n\
             rope_base = {}\nc_out = {}\npatch = {}\nencoder_seed = {}\n",
            t.steps,
            t.lr,
            t.batch,
            t.beta1,
            t.beta2,
            t.eps,
            t.weight_decay,
            t.hr_size,
            t.guidance_size,
            deltas.join(","),
            t.seed,
            t.checkpoint_every,
            m.d,
            m.n_heads,
            m.key_strategy,
            m.rope_base,
            m.c_in,
            self.patch,
            self.encoder_seed,
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |detail: String| Err(ConfigError::Constraint { detail });
        let t = &self.train;
        if t.steps == 0 || t.batch == 0 {
            return fail("steps and batch must be at least 1".into());
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return fail(format!("learning rate {} must be positive", t.lr));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(t.eps.is_finite() && t.eps > 0.0) || !(t.weight_decay.is_finite() && t.weight_decay >= 0.0)
        {
            return fail("eps must be positive and weight_decay nonnegative".into());
        }
        if self.patch == 0 || t.hr_size == 0 || t.guidance_size == 0 {
            return fail("patch, hr_size and guidance_size must be positive".into());
        }
        if t.hr_size % self.patch != 0 {
            return fail(format!("hr_size {} is not divisible by patch {}", t.hr_size, self.patch));
        }
        if t.delta_set.is_empty() {
            return fail("delta_set must list at least one low-resolution size".into());
        }
        for &delta in &t.delta_set {
            if delta == 0 || delta % self.patch != 0 {
                return fail(format!("delta {delta} is not divisible by patch {}", self.patch));
            }
            let factor = t.hr_size as f64 / delta as f64;
            if !(2.0..=4.0).contains(&factor) {
                return fail(format!(
                    "delta {delta} gives training factor {factor:.2}, outside [2, 4]"
                ));
            }
        }
        if let Err(e) = self.model.validate() {
            return fail(e.to_string());
        }
        Ok(())
    }
}

// ───────────────────────── errors ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    NonFiniteLoss { step: usize },
    NonFiniteGradient { step: usize },
    EncoderChannelMismatch { model: usize, encoder: usize },
    Config(ConfigError),
    Model(ModelError),
    Encoder(EncoderError),
    Autodiff(AutodiffError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFiniteLoss { step } => {
                write!(f, "loss became non-finite at step {step}")
            }
            TrainError::NonFiniteGradient { step } => {
                write!(f, "a gradient became non-finite at step {step}")
            }
            TrainError::EncoderChannelMismatch { model, encoder } => {
                write!(f, "model expects {model} feature channels, encoder yields {encoder}")
            }
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Encoder(e) => write!(f, "{e}"),
            TrainError::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl Error for TrainError {}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<EncoderError> for TrainError {
    fn from(e: EncoderError) -> Self {
        TrainError::Encoder(e)
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Autodiff(e)
    }
}

// ───────────────────────── view sampling ─────────────────────────

/// One training sample: guidance image, low-resolution input features, and
/// the high-resolution target features.
#[derive(Clone, Debug)]
pub struct TrainView<T: Scalar> {
    pub guidance: Image<T>,
    pub f_lr: FeatureMap<T>,
    pub target: FeatureMap<T>,
}

/// Renders a fresh scene and encodes its three views. Stream draws, in
/// order: the scene parameters, then the low-resolution side-length index.
pub fn sample_view<T: Scalar>(
    cfg: &TrainConfig,
    enc: &StubEncoder<T>,
    rng: &mut Rng,
) -> Result<TrainView<T>, TrainError> {
    let hr = synth_image::<T>(rng, cfg.hr_size);
    let delta = cfg.delta_set[rng.below(cfg.delta_set.len())];
    let lr_img = image_resize(&hr, delta, delta, ResizeMode::Bilinear);
    let guidance = image_resize(&hr, cfg.guidance_size, cfg.guidance_size, ResizeMode::Bilinear);
    let target = enc.encode(&hr)?;
    let f_lr = enc.encode(&lr_img)?;
    Ok(TrainView { guidance, f_lr, target })
}

// ───────────────────────── objective ─────────────────────────

/// Cosine-distance and Euclidean-distance terms between `[C, N]` nodes,
/// both computed per spatial location and averaged.
///
/// The cosine denominator is guarded by `+1e-8` and every square root's
/// argument by `+1e-16`, so the loss stays differentiable at zero vectors.
pub fn loss_terms_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
) -> AdResult<(NodeId, NodeId)> {
    let norm_of = |tape: &mut Tape<T>, x: NodeId| -> AdResult<NodeId> {
        let sq = tape.mul(x, x)?;
        let sums = tape.col_sums(sq)?;
        let sums = tape.add_scalar(sums, T::lit(1e-16));
        tape.sqrt(sums)
    };
    let dot = tape.mul(pred, target)?;
    let dot = tape.col_sums(dot)?;
    let pn = norm_of(tape, pred)?;
    let tn = norm_of(tape, target)?;
    let denom = tape.mul(pn, tn)?;
    let denom = tape.add_scalar(denom, T::lit(1e-8));
    let cos = tape.div(dot, denom)?;
    let one_minus = tape.affine(cos, -T::one(), T::one());
    let cos_term = tape.mean_all(one_minus);

    let diff = tape.sub(pred, target)?;
    let dist = norm_of(tape, diff)?;
    let l2_term = tape.mean_all(dist);
    Ok((cos_term, l2_term))
}

/// The full training loss: cosine term plus Euclidean term.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
) -> AdResult<NodeId> {
    let (cos_term, l2_term) = loss_terms_on_tape(tape, pred, target)?;
    tape.add(cos_term, l2_term)
}

/// Loss between two feature maps, without gradients.
pub fn loss_value<T: Scalar>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<T, TrainError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_2d());
    let t = tape.constant(target.to_2d());
    let loss = loss_on_tape(&mut tape, p, t)?;
    Ok(tape.scalar_value(loss))
}

// ───────────────────────── optimizer ─────────────────────────

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// A gradient entry was NaN or infinite; no parameter was touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFiniteGradient;

/// One bias-corrected AdamW update over parallel tensor/gradient lists.
pub fn adamw_step<T: Scalar>(
    opt: &AdamW,
    state: &mut AdamState<T>,
    tensors: Vec<&mut Tensor<T>>,
    grads: &[Vec<T>],
) -> Result<(), NonFiniteGradient> {
    assert_eq!(tensors.len(), grads.len(), "tensor/gradient lists must align");
    assert_eq!(tensors.len(), state.m.len(), "optimizer state must match");
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(NonFiniteGradient);
    }
    state.t += 1;
    let bc1 = T::lit(1.0 - opt.beta1.powi(state.t as i32));
    let bc2 = T::lit(1.0 - opt.beta2.powi(state.t as i32));
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let (lr, eps, wd) = (T::lit(opt.lr), T::lit(opt.eps), T::lit(opt.weight_decay));
    let one = T::one();
    for (i, tensor) in tensors.into_iter().enumerate() {
        let g = &grads[i];
        debug_assert_eq!(tensor.numel(), g.len());
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

// ───────────────────────── training loop ─────────────────────────

/// Progress callbacks from [`train`].
pub enum TrainEvent<'a, T: Scalar> {
    /// Emitted every [`LOG_EVERY`] steps and at the final step.
    Log { step: usize, steps: usize, recent_mean_loss: f64 },
    /// Emitted at intermediate checkpoint steps (never the final step).
    Checkpoint { step: usize, params: &'a JafarParams<T> },
}

/// Per-step batch-mean losses of one completed run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Runs the optimization loop, mutating `params` in place.
///
/// Single-threaded and deterministic: the caller's RNG is the only source of
/// randomness, and gradients accumulate over the batch in sample order with
/// a fixed `1/batch` scale.
pub fn train<T: Scalar>(
    run: &RunConfig,
    enc: &StubEncoder<T>,
    params: &mut JafarParams<T>,
    rng: &mut Rng,
    mut on_event: impl FnMut(TrainEvent<'_, T>),
) -> Result<TrainReport, TrainError> {
    run.validate()?;
    if enc.channels() != run.model.c_in {
        return Err(TrainError::EncoderChannelMismatch {
            model: run.model.c_in,
            encoder: enc.channels(),
        });
    }
    if params.cfg != run.model {
        return Err(TrainError::Model(ModelError::BadParameters {
            detail: "parameters were built for a different configuration".into(),
        }));
    }
    enc.grid_of(run.train.hr_size, run.train.hr_size)?;
    for &delta in &run.train.delta_set {
        enc.grid_of(delta, delta)?;
    }

    let tc = &run.train;
    let opt = AdamW {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.eps,
        weight_decay: tc.weight_decay,
    };
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut state = AdamState::<T>::new(&sizes);
    let inv_batch = T::one() / T::from_count(tc.batch);
    let mut losses = Vec::with_capacity(tc.steps);

    for step in 1..=tc.steps {
        let mut grad_acc: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut batch_loss = 0.0f64;
        for _ in 0..tc.batch {
            let view = sample_view(tc, enc, rng)?;
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let req = UpsampleRequest {
                guidance: &view.guidance,
                f_lr: &view.f_lr,
                out_h: view.target.h,
                out_w: view.target.w,
            };
            let pred = forward_on_tape(&mut tape, &params.cfg, &ids, &req)?;
            let tgt = tape.constant(view.target.to_2d());
            let loss = loss_on_tape(&mut tape, pred, tgt)?;
            let value = tape.scalar_value(loss).wide();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            batch_loss += value;
            tape.backward(loss)?;
            for (acc, &id) in grad_acc.iter_mut().zip(ids.ordered.iter()) {
                let g = tape.grad(id).expect("registered parameters receive gradients");
                for (a, &gv) in acc.iter_mut().zip(g.iter()) {
                    *a = *a + inv_batch * gv;
                }
            }
        }
        losses.push(batch_loss / tc.batch as f64);
        adamw_step(&opt, &mut state, params.tensors_mut(), &grad_acc)
            .map_err(|NonFiniteGradient| TrainError::NonFiniteGradient { step })?;
        if step % LOG_EVERY == 0 || step == tc.steps {
            let k = losses.len().min(LOG_EVERY);
            let recent = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
            on_event(TrainEvent::Log { step, steps: tc.steps, recent_mean_loss: recent });
        }
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != tc.steps {
            on_event(TrainEvent::Checkpoint { step, params });
        }
    }
    Ok(TrainReport { losses })
}

// ───────────────────────── composite gradient check ─────────────────────────

/// Full-pipeline objective for finite-difference checking: a small upsampler
/// forward pass plus the training loss against a fixed random target.
pub struct CompositeObjective {
    cfg: ModelConfig,
    guidance: Image<f64>,
    f_lr: FeatureMap<f64>,
    target: FeatureMap<f64>,
}

impl CompositeObjective {
    pub fn standard() -> Self {
        let cfg = ModelConfig::new(16, 2, 4, KeyStrategy::Sft);
        let mut rng = Rng::new(0xC0317);
        let guidance = synth_image::<f64>(&mut rng, 16);
        let f_lr = FeatureMap::from_tensor(&Tensor::randn(&[4, 2, 2], 1.0, &mut rng));
        let target = FeatureMap::from_tensor(&Tensor::randn(&[4, 4, 4], 1.0, &mut rng));
        CompositeObjective { cfg, guidance, f_lr, target }
    }

    /// The parameter point the check runs at.
    pub fn params(&self) -> Vec<(String, Tensor<f64>)> {
        JafarParams::<f64>::init(self.cfg.clone(), &mut Rng::new(0xBEEF))
            .expect("fixed configuration is valid")
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

impl Objective for CompositeObjective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, p: &[NodeId]) -> AdResult<NodeId> {
        let ids = ParamIds::from_ordered(&self.cfg, p).expect("fixed parameter layout");
        let guidance = self.guidance.cast::<T>();
        let f_lr = self.f_lr.cast::<T>();
        let req = UpsampleRequest {
            guidance: &guidance,
            f_lr: &f_lr,
            out_h: self.target.h,
            out_w: self.target.w,
        };
        let pred = match forward_on_tape(tape, &self.cfg, &ids, &req) {
            Ok(id) => id,
            Err(ModelError::Autodiff(e)) => return Err(e),
            Err(other) => panic!("composite objective misconfigured: {other}"),
        };
        let tgt = tape.constant(self.target.cast::<T>().to_2d());
        loss_on_tape(tape, pred, tgt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, CheckSettings};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig::new(8, 2, 4, KeyStrategy::Sft);
        run.patch = 4;
        run.train.hr_size = 24;
        run.train.guidance_size = 12;
        run.train.delta_set = vec![12, 8];
        run.train.steps = 5;
        run.train.batch = 2;
        run.train.lr = 1e-3;
        run
    }

    #[test]
    fn identical_features_have_near_zero_loss() {
        let mut rng = Rng::new(1);
        let f = FeatureMap::from_tensor(&Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng));
        let loss = loss_value(&f, &f).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn antipodal_unit_vectors_score_a_cosine_term_of_two() {
        let mut rng = Rng::new(2);
        let mut t = Tensor::<f64>::randn(&[3, 2, 2], 1.0, &mut rng);
        // Normalize each spatial column so the guards are negligible.
        for pos in 0..4 {
            let norm: f64 =
                (0..3).map(|c| t.data()[c * 4 + pos].powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                t.data_mut()[c * 4 + pos] /= norm;
            }
        }
        let target = FeatureMap::from_tensor(&t);
        let neg = FeatureMap::from_tensor(
            &Tensor::from_vec(&[3, 2, 2], t.data().iter().map(|v| -v).collect()),
        );
        let mut tape = Tape::new();
        let p = tape.constant(neg.to_2d());
        let g = tape.constant(target.to_2d());
        let (cos_term, l2_term) = loss_terms_on_tape(&mut tape, p, g).unwrap();
        assert!((tape.scalar_value(cos_term) - 2.0).abs() < 1e-6);
        // Antipodal unit vectors sit two apart in Euclidean distance too.
        assert!((tape.scalar_value(l2_term) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn adamw_first_step_moves_by_about_the_learning_rate() {
        let opt = AdamW { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut state = AdamState::<f64>::new(&[1]);
        let mut theta = Tensor::from_vec(&[1], vec![0.5f64]);
        adamw_step(&opt, &mut state, vec![&mut theta], &[vec![2.0]]).unwrap();
        // Bias-corrected m̂ = g and v̂ = g², so the step is lr·g/(|g|+eps).
        assert!((theta.data()[0] - (0.5 - 0.01)).abs() < 1e-6, "{:?}", theta.data());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradients() {
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 };
        let mut state = AdamState::<f64>::new(&[1]);
        let mut theta = Tensor::from_vec(&[1], vec![1.0f64]);
        adamw_step(&opt, &mut state, vec![&mut theta], &[vec![0.0]]).unwrap();
        assert!((theta.data()[0] - 0.95).abs() < 1e-12, "{:?}", theta.data());
    }

    #[test]
    fn non_finite_gradients_leave_parameters_untouched() {
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut state = AdamState::<f64>::new(&[2]);
        let mut theta = Tensor::from_vec(&[2], vec![1.0f64, 2.0]);
        let err = adamw_step(&opt, &mut state, vec![&mut theta], &[vec![0.1, f64::NAN]]);
        assert_eq!(err, Err(NonFiniteGradient));
        assert_eq!(theta.data(), &[1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn config_defaults_survive_an_empty_file_and_round_trip() {
        let parsed = RunConfig::parse("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        let tiny = tiny_run();
        assert_eq!(RunConfig::parse(&tiny.to_text()).unwrap(), tiny);
    }

    #[test]
    fn config_overrides_comments_and_lists_parse() {
        let text = "steps = 7   # short run\n\nlr = 0.001\ndelta_set = 32, 24,16\nkey_strategy = concat\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.delta_set, vec![32, 24, 16]);
        assert_eq!(cfg.model.key_strategy, KeyStrategy::Concat);
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_malformed_input() {
        assert!(matches!(
            RunConfig::parse("momentum = 0.9"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            RunConfig::parse("steps = 3\nsteps = 4"),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(
            RunConfig::parse("steps 3"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("steps = many"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn config_rejects_out_of_range_training_factors() {
        // hr 64 with delta 8 would train at 8×, outside the sampling range.
        let err = RunConfig::parse("delta_set = 8").unwrap_err();
        assert!(matches!(err, ConfigError::Constraint { .. }), "{err}");
        let err = RunConfig::parse("hr_size = 63").unwrap_err();
        assert!(matches!(err, ConfigError::Constraint { .. }), "{err}");
    }

    #[test]
    fn sampled_views_have_consistent_shapes() {
        let run = tiny_run();
        let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, 4);
        let mut rng = Rng::new(9);
        let mut seen_sizes = Vec::new();
        for _ in 0..12 {
            let view = sample_view(&run.train, &enc, &mut rng).unwrap();
            assert_eq!((view.guidance.h, view.guidance.w), (12, 12));
            assert_eq!((view.target.c, view.target.h, view.target.w), (4, 6, 6));
            assert_eq!(view.f_lr.c, 4);
            seen_sizes.push(view.f_lr.h);
        }
        assert!(seen_sizes.iter().all(|s| [3usize, 2].contains(s)));
        assert!(seen_sizes.contains(&3) && seen_sizes.contains(&2), "{seen_sizes:?}");
    }

    #[test]
    fn a_short_run_reduces_the_loss_and_stays_finite() {
        let mut run = tiny_run();
        run.train.steps = 120;
        let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, 4);
        let mut rng = Rng::new(run.train.seed);
        let mut params = JafarParams::<f32>::init(run.model.clone(), &mut rng).unwrap();
        let report = train(&run, &enc, &mut params, &mut rng, |_| {}).unwrap();
        assert_eq!(report.losses.len(), 120);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        // Windows of 40 average out per-view difficulty differences.
        let first: f64 = report.losses[..40].iter().sum::<f64>() / 40.0;
        let last: f64 = report.losses[80..].iter().sum::<f64>() / 40.0;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn reruns_with_one_seed_are_bitwise_identical() {
        let run = tiny_run();
        let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, 4);
        let do_run = || {
            let mut rng = Rng::new(run.train.seed);
            let mut params = JafarParams::<f32>::init(run.model.clone(), &mut rng).unwrap();
            let report = train(&run, &enc, &mut params, &mut rng, |_| {}).unwrap();
            (params, report.losses)
        };
        let (pa, la) = do_run();
        let (pb, lb) = do_run();
        assert_eq!(pa, pb);
        assert_eq!(
            la.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn log_events_fire_on_schedule_and_checkpoints_skip_the_final_step() {
        let mut run = tiny_run();
        run.train.steps = 7;
        run.train.checkpoint_every = 3;
        run.train.batch = 1;
        let enc = StubEncoder::<f32>::new(run.encoder_seed, run.patch, 4);
        let mut rng = Rng::new(run.train.seed);
        let mut params = JafarParams::<f32>::init(run.model.clone(), &mut rng).unwrap();
        let mut logs = Vec::new();
        let mut ckpts = Vec::new();
        train(&run, &enc, &mut params, &mut rng, |ev| match ev {
            TrainEvent::Log { step, .. } => logs.push(step),
            TrainEvent::Checkpoint { step, .. } => ckpts.push(step),
        })
        .unwrap();
        assert_eq!(logs, vec![7]);
        assert_eq!(ckpts, vec![3, 6]);
    }

    #[test]
    fn mismatched_encoder_or_parameters_are_rejected_up_front() {
        let run = tiny_run();
        let enc = StubEncoder::<f32>::new(0, 4, 9);
        let mut rng = Rng::new(0);
        let mut params = JafarParams::<f32>::init(run.model.clone(), &mut rng).unwrap();
        assert!(matches!(
            train(&run, &enc, &mut params, &mut rng, |_| {}),
            Err(TrainError::EncoderChannelMismatch { model: 4, encoder: 9 })
        ));
        let enc = StubEncoder::<f32>::new(0, 4, 4);
        let other_cfg = ModelConfig::new(8, 2, 4, KeyStrategy::Concat);
        let mut wrong = JafarParams::<f32>::init(other_cfg, &mut rng).unwrap();
        assert!(matches!(
            train(&run, &enc, &mut wrong, &mut rng, |_| {}),
            Err(TrainError::Model(ModelError::BadParameters { .. }))
        ));
    }

    #[test]
    fn composite_gradient_check_samples_under_the_relaxed_tolerance() {
        let obj = CompositeObjective::standard();
        let params = obj.params();
        let settings = CheckSettings {
            step: 1e-3,
            tol: 1e-3,
            samples_per_param: Some(3),
            seed: 0x5eed,
        };
        let report = grad_check(&obj, &params, &settings).unwrap();
        assert!(
            report.passed(),
            "composite objective: max rel err {} over tol {}",
            report.max_rel_err(),
            report.tol
        );
    }
}
