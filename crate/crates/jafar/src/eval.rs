//! Evaluation: interpolation baselines, reconstruction scores, PCA feature
//! visualization, saliency-map metrics, and the cross-factor generalization
//! protocol.
//!
//! Scenes are resolution-independent, so ground-truth features at any output
//! resolution come from encoding a resize of the same high-resolution render
//! that produced the low-resolution input — no stored assets, no labels.

use std::error::Error;
use std::fmt;

use crate::encoder::{EncoderError, StubEncoder};
use crate::image::{image_resize, resize_plane, sample_scene, render, Image, ResizeMode};
use crate::model::{JafarParams, ModelError, UpsampleRequest};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, SaliencyMap};

// ───────────────────────── errors ─────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyInput,
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// A map had (numerically) zero variance, so correlation is undefined.
    ConstantMap,
    /// A full-image score must be positive to normalize drops against.
    NonPositiveFullScore { value: f64 },
    ScoreOutOfRange { name: &'static str, value: f64 },
    /// A harmonic-mean term was nonpositive.
    UndefinedHarmonicMean { term: &'static str },
    Model(ModelError),
    Encoder(EncoderError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyInput => write!(f, "evaluation needs at least one element"),
            EvalError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            EvalError::ConstantMap => write!(f, "saliency map is constant; correlation undefined"),
            EvalError::NonPositiveFullScore { value } => {
                write!(f, "full-image score {value} must be positive")
            }
            EvalError::ScoreOutOfRange { name, value } => {
                write!(f, "{name} score {value} lies outside [0, 1]")
            }
            EvalError::UndefinedHarmonicMean { term } => {
                write!(f, "harmonic mean undefined: {term} term is nonpositive")
            }
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Encoder(e) => write!(f, "{e}"),
        }
    }
}

impl Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<EncoderError> for EvalError {
    fn from(e: EncoderError) -> Self {
        EvalError::Encoder(e)
    }
}

// ───────────────────────── baselines and scores ─────────────────────────

/// Channel-wise feature-map resize — the parameter-free baselines.
pub fn feature_resize<T: Scalar>(
    f: &FeatureMap<T>,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> FeatureMap<T> {
    assert!(out_h > 0 && out_w > 0, "target size must be positive");
    let mut data = Vec::with_capacity(f.c * out_h * out_w);
    for c in 0..f.c {
        data.extend(resize_plane(f.plane(c), f.h, f.w, out_h, out_w, mode));
    }
    FeatureMap::from_vec(f.c, out_h, out_w, data)
}

/// Location-averaged agreement between a prediction and its target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconScore {
    /// Mean per-location cosine similarity.
    pub mean_cos: f64,
    /// Mean per-location Euclidean distance.
    pub mean_l2: f64,
}

/// Scores a predicted feature map against the target (64-bit accumulation).
pub fn recon_score<T: Scalar>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
) -> Result<ReconScore, EvalError> {
    if (pred.c, pred.h, pred.w) != (target.c, target.h, target.w) {
        return Err(EvalError::ShapeMismatch {
            left: vec![pred.c, pred.h, pred.w],
            right: vec![target.c, target.h, target.w],
        });
    }
    let n = pred.h * pred.w;
    if n == 0 || pred.c == 0 {
        return Err(EvalError::EmptyInput);
    }
    let mut cos_sum = 0.0f64;
    let mut l2_sum = 0.0f64;
    for pos in 0..n {
        let mut dot = 0.0f64;
        let mut pp = 0.0f64;
        let mut tt = 0.0f64;
        let mut dd = 0.0f64;
        for c in 0..pred.c {
            let p = pred.data()[c * n + pos].wide();
            let t = target.data()[c * n + pos].wide();
            dot += p * t;
            pp += p * p;
            tt += t * t;
            dd += (p - t) * (p - t);
        }
        cos_sum += dot / (pp.sqrt() * tt.sqrt() + 1e-8);
        l2_sum += dd.sqrt();
    }
    Ok(ReconScore { mean_cos: cos_sum / n as f64, mean_l2: l2_sum / n as f64 })
}

// ───────────────────────── PCA visualization ─────────────────────────

/// Projects feature maps onto a shared 3-component PCA basis and rescales
/// each component jointly to `[0, 1]`, yielding one RGB image per map.
///
/// The basis comes from power iteration with deflation on the pooled
/// covariance; components beyond the data's rank render as flat 0.5.
pub fn pca_rgb<T: Scalar>(maps: &[&FeatureMap<T>]) -> Result<Vec<Image<f64>>, EvalError> {
    if maps.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let c = maps[0].c;
    if c == 0 {
        return Err(EvalError::EmptyInput);
    }
    for m in maps {
        if m.c != c {
            return Err(EvalError::ShapeMismatch {
                left: vec![maps[0].c],
                right: vec![m.c],
            });
        }
    }
    let total: usize = maps.iter().map(|m| m.h * m.w).sum();
    if total == 0 {
        return Err(EvalError::EmptyInput);
    }

    // Pooled mean and covariance across every location of every map.
    let mut mean = vec![0.0f64; c];
    for m in maps {
        for ch in 0..c {
            for &v in m.plane(ch) {
                mean[ch] += v.wide();
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= total as f64;
    }
    let mut cov = vec![0.0f64; c * c];
    for m in maps {
        let n = m.h * m.w;
        for pos in 0..n {
            for i in 0..c {
                let xi = m.data()[i * n + pos].wide() - mean[i];
                for j in i..c {
                    let xj = m.data()[j * n + pos].wide() - mean[j];
                    cov[i * c + j] += xi * xj;
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= total as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }

    // Leading eigenvectors by power iteration with deflation.
    let mut basis: Vec<Option<Vec<f64>>> = Vec::new();
    let mut deflated = cov.clone();
    let mut rng = Rng::new(0x9CA_5EED);
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm.max(1e-300);
        }
        let mut lambda = 0.0f64;
        for _ in 0..100 {
            let mut w = vec![0.0f64; c];
            for i in 0..c {
                for j in 0..c {
                    w[i] += deflated[i * c + j] * v[j];
                }
            }
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wn < 1e-12 {
                break; // rank exhausted
            }
            let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
            let delta: f64 = next
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).abs().min((a + b).abs()))
                .fold(0.0, f64::max);
            v = next;
            lambda = wn;
            if delta < 1e-7 {
                break;
            }
        }
        if lambda < 1e-12 {
            basis.push(None);
            continue;
        }
        // Deterministic sign: largest-magnitude coordinate positive.
        let lead = (0..c).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        for i in 0..c {
            for j in 0..c {
                deflated[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        basis.push(Some(v));
    }

    // Project every map, tracking joint component ranges.
    let mut projected: Vec<Vec<f64>> = Vec::with_capacity(maps.len());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for m in maps {
        let n = m.h * m.w;
        let mut planes = vec![0.0f64; 3 * n];
        for (k, vk) in basis.iter().enumerate() {
            if let Some(v) = vk {
                for pos in 0..n {
                    let mut s = 0.0f64;
                    for ch in 0..c {
                        s += (m.data()[ch * n + pos].wide() - mean[ch]) * v[ch];
                    }
                    planes[k * n + pos] = s;
                    lo[k] = lo[k].min(s);
                    hi[k] = hi[k].max(s);
                }
            }
        }
        projected.push(planes);
    }

    let out = maps
        .iter()
        .zip(projected.into_iter())
        .map(|(m, planes)| {
            let n = m.h * m.w;
            let mut data = vec![0.5f64; 3 * n];
            for k in 0..3 {
                if basis[k].is_some() && hi[k] - lo[k] > 1e-12 {
                    let span = hi[k] - lo[k];
                    for pos in 0..n {
                        data[k * n + pos] = (planes[k * n + pos] - lo[k]) / span;
                    }
                }
            }
            Image::from_vec(m.h, m.w, data)
        })
        .collect();
    Ok(out)
}

// ───────────────────────── saliency-map metrics ─────────────────────────

/// One classifier-score pair: `full` on the original input, `masked` on the
/// saliency-masked input. Both are confidences; `full` must be positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePair {
    pub full: f64,
    pub masked: f64,
}

fn check_pairs(pairs: &[ScorePair]) -> Result<(), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for p in pairs {
        if !(p.full.is_finite() && p.full > 0.0 && p.full <= 1.0) {
            if p.full.is_finite() && (0.0..=1.0).contains(&p.full) {
                return Err(EvalError::NonPositiveFullScore { value: p.full });
            }
            return Err(EvalError::ScoreOutOfRange { name: "full", value: p.full });
        }
        if !(p.masked.is_finite() && (0.0..=1.0).contains(&p.masked)) {
            return Err(EvalError::ScoreOutOfRange { name: "masked", value: p.masked });
        }
    }
    Ok(())
}

/// Mean relative confidence loss under masking, as a percentage.
pub fn average_drop(pairs: &[ScorePair]) -> Result<f64, EvalError> {
    check_pairs(pairs)?;
    let s: f64 = pairs.iter().map(|p| (p.full - p.masked).max(0.0) / p.full).sum();
    Ok(100.0 * s / pairs.len() as f64)
}

/// Share of samples whose confidence rises under masking, as a percentage.
pub fn average_increase(pairs: &[ScorePair]) -> Result<f64, EvalError> {
    check_pairs(pairs)?;
    let k = pairs.iter().filter(|p| p.masked > p.full).count();
    Ok(100.0 * k as f64 / pairs.len() as f64)
}

/// Mean relative confidence gain under masking, normalized by headroom.
pub fn average_gain(pairs: &[ScorePair]) -> Result<f64, EvalError> {
    check_pairs(pairs)?;
    let s: f64 = pairs
        .iter()
        .map(|p| {
            if p.full >= 1.0 {
                0.0 // no headroom left to gain
            } else {
                (p.masked - p.full).max(0.0) / (1.0 - p.full)
            }
        })
        .sum();
    Ok(100.0 * s / pairs.len() as f64)
}

/// Pearson correlation between two maps mapped onto `[0, 100]`.
pub fn coherency(a: &SaliencyMap<f64>, b: &SaliencyMap<f64>) -> Result<f64, EvalError> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(EvalError::ShapeMismatch { left: vec![a.h, a.w], right: vec![b.h, b.w] });
    }
    let n = a.h * a.w;
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    let mean = |m: &SaliencyMap<f64>| m.data().iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for i in 0..n {
        let da = a.data()[i] - ma;
        let db = b.data()[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va / n as f64 <= 1e-16 || vb / n as f64 <= 1e-16 {
        return Err(EvalError::ConstantMap);
    }
    let pearson = cov / (va.sqrt() * vb.sqrt());
    Ok(100.0 * (pearson + 1.0) / 2.0)
}

/// Share of active (above `1e-8`) saliency entries, as a percentage: a proxy
/// for how much of the input the explanation highlights.
pub fn complexity(map: &SaliencyMap<f64>) -> Result<f64, EvalError> {
    let n = map.h * map.w;
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    let k = map.data().iter().filter(|&&v| v > 1e-8).count();
    Ok(100.0 * k as f64 / n as f64)
}

/// Harmonic mean of coherency, (100 − complexity) and (100 − average drop),
/// all percentages. Errors when any term is nonpositive.
pub fn adcc(coherency: f64, complexity: f64, average_drop: f64) -> Result<f64, EvalError> {
    let terms = [
        ("coherency", coherency / 100.0),
        ("complexity", 1.0 - complexity / 100.0),
        ("average drop", 1.0 - average_drop / 100.0),
    ];
    let mut denom = 0.0f64;
    for (name, t) in terms {
        if !(t.is_finite() && t > 0.0) {
            return Err(EvalError::UndefinedHarmonicMean { term: name });
        }
        denom += 1.0 / t;
    }
    Ok(100.0 * 3.0 / denom)
}

/// Keeps pixels where the saliency is strictly positive, zeroing the rest.
pub fn mask_by_saliency<T: Scalar>(
    img: &Image<T>,
    map: &SaliencyMap<T>,
) -> Result<Image<T>, EvalError> {
    if (img.h, img.w) != (map.h, map.w) {
        return Err(EvalError::ShapeMismatch {
            left: vec![img.h, img.w],
            right: vec![map.h, map.w],
        });
    }
    let mut out = Image::zeros(img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            if map.at(y, x) > T::zero() {
                for ch in 0..3 {
                    out.set(ch, y, x, img.at(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

// ───────────────────────── generalization protocol ─────────────────────────

/// Settings for the cross-factor evaluation.
#[derive(Clone, Debug)]
pub struct GenConfig {
    /// Number of freshly drawn scenes.
    pub images: usize,
    /// Output-over-input upsampling factors to probe.
    pub factors: Vec<usize>,
    /// Side length of the base image whose encoding is upsampled.
    pub base_size: usize,
    /// Guidance side length per unit factor (`guidance = this · factor`).
    pub guidance_base: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { images: 50, factors: vec![2, 4, 8], base_size: 64, guidance_base: 32, seed: 7 }
    }
}

/// Aggregate scores of one method at one factor.
#[derive(Clone, Copy, Debug)]
pub struct MethodScore {
    pub mean_cos: f64,
    pub mean_l2: f64,
}

fn aggregate(scores: &[ReconScore]) -> MethodScore {
    let n = scores.len().max(1) as f64;
    MethodScore {
        mean_cos: scores.iter().map(|s| s.mean_cos).sum::<f64>() / n,
        mean_l2: scores.iter().map(|s| s.mean_l2).sum::<f64>() / n,
    }
}

/// Every method's outcome at one upsampling factor.
#[derive(Clone, Debug)]
pub struct FactorReport {
    pub factor: usize,
    pub jafar: MethodScore,
    pub bilinear: MethodScore,
    pub nearest: MethodScore,
    pub per_image_jafar_cos: Vec<f64>,
    pub per_image_bilinear_cos: Vec<f64>,
    /// Images where the upsampler's cosine beats bilinear's.
    pub jafar_beats_bilinear: usize,
}

/// Full cross-factor evaluation outcome.
#[derive(Clone, Debug)]
pub struct GenReport {
    pub images: usize,
    pub factors: Vec<FactorReport>,
}

impl GenReport {
    /// `factor,method,mean_cos,mean_l2` rows, one per method and factor.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("factor,method,mean_cos,mean_l2\n");
        for f in &self.factors {
            for (name, score) in [
                ("jafar", &f.jafar),
                ("bilinear", &f.bilinear),
                ("nearest", &f.nearest),
            ] {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6}\n",
                    f.factor, name, score.mean_cos, score.mean_l2
                ));
            }
        }
        out
    }
}

/// Compares the upsampler against interpolation baselines across factors.
///
/// Per scene: render once at `base_size · max_factor`, downsample to the
/// base size and encode it — that encoding is the shared low-resolution
/// input. Per factor `s`, the target is the encoding of the render resized
/// to `base_size · s`, and the guidance image is the render resized to
/// `guidance_base · s`. Baselines resize the same shared input.
pub fn generalization_eval<T: Scalar>(
    params: &JafarParams<T>,
    enc: &StubEncoder<T>,
    cfg: &GenConfig,
) -> Result<GenReport, EvalError> {
    if cfg.images == 0 || cfg.factors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let max_factor = *cfg.factors.iter().max().expect("nonempty");
    if max_factor == 0 || cfg.base_size == 0 || cfg.guidance_base == 0 {
        return Err(EvalError::EmptyInput);
    }
    let mut rng = Rng::new(cfg.seed);
    let mut per_factor: Vec<(Vec<ReconScore>, Vec<ReconScore>, Vec<ReconScore>)> =
        cfg.factors.iter().map(|_| (Vec::new(), Vec::new(), Vec::new())).collect();

    for _ in 0..cfg.images {
        let scene = sample_scene(&mut rng);
        let hi = render::<T>(&scene, cfg.base_size * max_factor);
        let base = image_resize(&hi, cfg.base_size, cfg.base_size, ResizeMode::Bilinear);
        let f_lr = enc.encode(&base)?;

        for (fi, &factor) in cfg.factors.iter().enumerate() {
            let out_side = cfg.base_size * factor;
            let target_img = image_resize(&hi, out_side, out_side, ResizeMode::Bilinear);
            let target = enc.encode(&target_img)?;
            let g_side = cfg.guidance_base * factor;
            let guidance = image_resize(&hi, g_side, g_side, ResizeMode::Bilinear);

            let req = UpsampleRequest {
                guidance: &guidance,
                f_lr: &f_lr,
                out_h: target.h,
                out_w: target.w,
            };
            let up = params.upsample(&req)?;
            per_factor[fi].0.push(recon_score(&up, &target)?);
            let bl = feature_resize(&f_lr, target.h, target.w, ResizeMode::Bilinear);
            per_factor[fi].1.push(recon_score(&bl, &target)?);
            let nn = feature_resize(&f_lr, target.h, target.w, ResizeMode::Nearest);
            per_factor[fi].2.push(recon_score(&nn, &target)?);
        }
    }

    let factors = cfg
        .factors
        .iter()
        .zip(per_factor.into_iter())
        .map(|(&factor, (j, b, n))| {
            let wins = j
                .iter()
                .zip(b.iter())
                .filter(|(js, bs)| js.mean_cos > bs.mean_cos)
                .count();
            FactorReport {
                factor,
                jafar: aggregate(&j),
                bilinear: aggregate(&b),
                nearest: aggregate(&n),
                per_image_jafar_cos: j.iter().map(|s| s.mean_cos).collect(),
                per_image_bilinear_cos: b.iter().map(|s| s.mean_cos).collect(),
                jafar_beats_bilinear: wins,
            }
        })
        .collect();
    Ok(GenReport { images: cfg.images, factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeyStrategy, ModelConfig};
    use crate::tensor::Tensor;

    #[test]
    fn feature_resize_matches_the_pixel_resizer_per_plane() {
        let f = FeatureMap::from_vec(1, 1, 2, vec![0.0f64, 1.0]);
        let up = feature_resize(&f, 1, 4, ResizeMode::Bilinear);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in up.plane(0).iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
        let up = feature_resize(&f, 2, 2, ResizeMode::Nearest);
        assert_eq!((up.c, up.h, up.w), (1, 2, 2));
    }

    #[test]
    fn identical_maps_score_perfect_cosine_and_zero_distance() {
        let mut rng = Rng::new(1);
        let f = FeatureMap::from_tensor(&Tensor::<f64>::randn(&[4, 3, 3], 1.0, &mut rng));
        let s = recon_score(&f, &f).unwrap();
        assert!((s.mean_cos - 1.0).abs() < 1e-6, "{s:?}");
        assert!(s.mean_l2 < 1e-12);
    }

    #[test]
    fn orthogonal_maps_score_near_zero_cosine() {
        let a = FeatureMap::from_vec(2, 1, 2, vec![1.0f64, 1.0, 0.0, 0.0]);
        let b = FeatureMap::from_vec(2, 1, 2, vec![0.0f64, 0.0, 1.0, 1.0]);
        let s = recon_score(&a, &b).unwrap();
        assert!(s.mean_cos.abs() < 1e-6);
        assert!((s.mean_l2 - 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn recon_score_rejects_mismatched_shapes() {
        let a = FeatureMap::<f64>::zeros(2, 2, 2);
        let b = FeatureMap::<f64>::zeros(2, 3, 2);
        assert!(matches!(recon_score(&a, &b), Err(EvalError::ShapeMismatch { .. })));
    }

    #[test]
    fn masking_metrics_match_hand_computed_values() {
        let pairs = [
            ScorePair { full: 0.8, masked: 0.6 },
            ScorePair { full: 0.5, masked: 0.7 },
        ];
        assert!((average_drop(&pairs).unwrap() - 12.5).abs() < 1e-9);
        assert!((average_increase(&pairs).unwrap() - 50.0).abs() < 1e-9);
        assert!((average_gain(&pairs).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn a_perfectly_recovered_score_counts_as_full_gain() {
        let pairs = [ScorePair { full: 0.5, masked: 1.0 }];
        assert!((average_gain(&pairs).unwrap() - 100.0).abs() < 1e-9);
        // Saturated full score leaves no headroom and contributes zero.
        let pairs = [ScorePair { full: 1.0, masked: 1.0 }];
        assert_eq!(average_gain(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn invalid_score_pairs_are_rejected() {
        assert!(matches!(average_drop(&[]), Err(EvalError::EmptyInput)));
        let zero_full = [ScorePair { full: 0.0, masked: 0.5 }];
        assert!(matches!(
            average_drop(&zero_full),
            Err(EvalError::NonPositiveFullScore { .. })
        ));
        let wild = [ScorePair { full: 0.5, masked: 1.2 }];
        assert!(matches!(
            average_increase(&wild),
            Err(EvalError::ScoreOutOfRange { name: "masked", .. })
        ));
    }

    #[test]
    fn coherency_spans_identical_to_anticorrelated() {
        let a = SaliencyMap::from_vec(1, 4, vec![0.1, 0.4, 0.2, 0.9]);
        let same = coherency(&a, &a).unwrap();
        assert!((same - 100.0).abs() < 1e-9);
        let neg = SaliencyMap::from_vec(1, 4, a.data().iter().map(|v| 1.0 - v).collect());
        assert!(coherency(&a, &neg).unwrap().abs() < 1e-9);
        let flat = SaliencyMap::from_vec(1, 4, vec![0.3; 4]);
        assert!(matches!(coherency(&a, &flat), Err(EvalError::ConstantMap)));
    }

    #[test]
    fn complexity_counts_active_cells() {
        let m = SaliencyMap::from_vec(2, 2, vec![0.0, 0.5, 1e-9, 0.2]);
        assert!((complexity(&m).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn adcc_reproduces_reference_values() {
        assert!((adcc(91.4, 44.1, 17.4).unwrap() - 73.3).abs() < 0.05);
        assert!((adcc(100.0, 0.0, 0.0).unwrap() - 100.0).abs() < 1e-9);
        assert!((adcc(50.0, 50.0, 50.0).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(
            adcc(0.0, 10.0, 10.0),
            Err(EvalError::UndefinedHarmonicMean { term: "coherency" })
        ));
        assert!(matches!(
            adcc(50.0, 100.0, 10.0),
            Err(EvalError::UndefinedHarmonicMean { term: "complexity" })
        ));
        assert!(matches!(
            adcc(50.0, 10.0, 100.0),
            Err(EvalError::UndefinedHarmonicMean { term: "average drop" })
        ));
    }

    #[test]
    fn saliency_masking_keeps_exactly_the_positive_cells() {
        let img = Image::from_vec(2, 2, (0..12).map(|v| v as f64 / 12.0).collect());
        let map = SaliencyMap::from_vec(2, 2, vec![0.5, 0.0, -0.1, 1.0]);
        let masked = mask_by_saliency(&img, &map).unwrap();
        for ch in 0..3 {
            assert_eq!(masked.at(ch, 0, 0), img.at(ch, 0, 0));
            assert_eq!(masked.at(ch, 0, 1), 0.0);
            assert_eq!(masked.at(ch, 1, 0), 0.0);
            assert_eq!(masked.at(ch, 1, 1), img.at(ch, 1, 1));
        }
        let small = SaliencyMap::from_vec(1, 1, vec![1.0]);
        assert!(matches!(mask_by_saliency(&img, &small), Err(EvalError::ShapeMismatch { .. })));
    }

    #[test]
    fn pca_recovers_a_one_dimensional_structure() {
        // Channels are scaled copies of one spatial pattern: rank 1.
        let n = 16;
        let pattern: Vec<f64> = (0..n).map(|i| (i as f64 / 3.0).sin()).collect();
        let mut data = Vec::new();
        for scale in [1.0, -2.0, 0.5, 3.0] {
            data.extend(pattern.iter().map(|v| v * scale));
        }
        let f = FeatureMap::from_vec(4, 4, 4, data);
        let rgb = pca_rgb(&[&f]).unwrap();
        assert_eq!(rgb.len(), 1);
        let img = &rgb[0];
        // First component varies with the pattern; ranks 2 and 3 are flat 0.5.
        let r = img.plane(0);
        let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - r.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((spread - 1.0).abs() < 1e-9, "leading component spans [0,1]");
        assert!(img.plane(1).iter().all(|&v| v == 0.5));
        assert!(img.plane(2).iter().all(|&v| v == 0.5));
        // The leading component reproduces the pattern up to an affine map:
        // correlation magnitude with the pattern should be essentially 1.
        let mp = pattern.iter().sum::<f64>() / n as f64;
        let mr = r.iter().sum::<f64>() / n as f64;
        let mut num = 0.0;
        let mut dp = 0.0;
        let mut dr = 0.0;
        for i in 0..n {
            num += (pattern[i] - mp) * (r[i] - mr);
            dp += (pattern[i] - mp).powi(2);
            dr += (r[i] - mr).powi(2);
        }
        assert!((num.abs() / (dp.sqrt() * dr.sqrt()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_uses_one_shared_basis_for_all_maps() {
        // A map and its own copy must render identically; ranges are joint.
        let mut rng = Rng::new(5);
        let a = FeatureMap::from_tensor(&Tensor::<f32>::randn(&[6, 5, 4], 1.0, &mut rng));
        let b = FeatureMap::from_tensor(&Tensor::<f32>::randn(&[6, 3, 7], 1.0, &mut rng));
        let rgb = pca_rgb(&[&a, &b, &a]).unwrap();
        assert_eq!(rgb[0].data(), rgb[2].data());
        for img in &rgb {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let short = FeatureMap::<f32>::zeros(5, 2, 2);
        assert!(matches!(pca_rgb(&[&a, &short]), Err(EvalError::ShapeMismatch { .. })));
        assert!(matches!(pca_rgb::<f32>(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn generalization_eval_produces_consistent_reports() {
        let cfg = ModelConfig::new(8, 2, 4, KeyStrategy::Sft);
        let params = JafarParams::<f32>::init(cfg, &mut Rng::new(3)).unwrap();
        let enc = StubEncoder::<f32>::new(0, 4, 4);
        let gen = GenConfig { images: 2, factors: vec![2], base_size: 16, guidance_base: 8, seed: 4 };
        let report = generalization_eval(&params, &enc, &gen).unwrap();
        assert_eq!(report.images, 2);
        assert_eq!(report.factors.len(), 1);
        let f = &report.factors[0];
        assert_eq!(f.per_image_jafar_cos.len(), 2);
        assert!(f.jafar_beats_bilinear <= 2);
        assert!(f.jafar.mean_cos.is_finite() && f.nearest.mean_cos.is_finite());
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "factor,method,mean_cos,mean_l2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("2,jafar,"));
        assert!(lines[3].starts_with("2,nearest,"));
    }

    #[test]
    fn generalization_eval_is_deterministic_for_a_seed() {
        let cfg = ModelConfig::new(8, 2, 4, KeyStrategy::Sft);
        let params = JafarParams::<f32>::init(cfg, &mut Rng::new(3)).unwrap();
        let enc = StubEncoder::<f32>::new(0, 4, 4);
        let gen = GenConfig { images: 2, factors: vec![2], base_size: 16, guidance_base: 8, seed: 4 };
        let a = generalization_eval(&params, &enc, &gen).unwrap().to_csv();
        let b = generalization_eval(&params, &enc, &gen).unwrap().to_csv();
        assert_eq!(a, b);
    }
}
