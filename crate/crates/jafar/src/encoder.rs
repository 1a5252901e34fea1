//! Frozen convolutional stub encoder.
//!
//! Stands in for a large pretrained vision backbone during training and
//! evaluation: it maps an RGB image to a `C×(H/p)×(W/p)` feature map through
//! a patch embedding, a SiLU nonlinearity and a 3×3 mixing convolution. Its
//! weights are drawn once from a seed and never updated, so the same seed
//! always yields the same feature extractor.

use std::error::Error;
use std::fmt;

use crate::image::Image;
use crate::kernels;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderError {
    /// The image dimensions are not multiples of the patch size.
    IndivisibleImage { h: usize, w: usize, patch: usize },
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::IndivisibleImage { h, w, patch } => {
                write!(f, "image {h}x{w} is not divisible by patch size {patch}")
            }
        }
    }
}

impl Error for EncoderError {}

/// Seed-deterministic frozen encoder: patch embed → SiLU → 3×3 conv.
#[derive(Clone, Debug)]
pub struct StubEncoder<T: Scalar> {
    patch: usize,
    c_out: usize,
    /// Patch projection, `(3·patch²)×c_out`.
    w_patch: Vec<T>,
    /// Mixing convolution, `c_out×c_out×3×3`.
    w_mix: Vec<T>,
    b_mix: Vec<T>,
}

fn draw_scaled<T: Scalar>(rng: &mut Rng, n: usize, std: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.normal() * std)).collect()
}

/// 3×3 convolution with replicate (edge-clamp) padding.
///
/// Clamped borders keep constant regions constant at any grid size, so the
/// encoder produces mutually consistent maps across resolutions — a zero
/// padded border would darken one grid cell, which covers a different image
/// area at every resolution.
fn conv3x3_replicate<T: Scalar>(
    x: &[T],
    wgt: &[T],
    b: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut y = vec![T::zero(); c * hw];
    for o in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b[o];
                for i in 0..c {
                    let plane = &x[i * hw..(i + 1) * hw];
                    let wbase = ((o * c) + i) * 9;
                    for (t, (dy, dx)) in
                        [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
                            .into_iter()
                            .enumerate()
                    {
                        let sy = (yy as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc = acc + wgt[wbase + t] * plane[sy * w + sx];
                    }
                }
                y[o * hw + yy * w + xx] = acc;
            }
        }
    }
    y
}

impl<T: Scalar> StubEncoder<T> {
    pub fn new(seed: u64, patch: usize, c_out: usize) -> Self {
        assert!(patch > 0 && c_out > 0, "patch and channel count must be positive");
        let mut rng = Rng::new(seed);
        let d_in = 3 * patch * patch;
        let w_patch = draw_scaled(&mut rng, d_in * c_out, (2.0 / d_in as f64).sqrt());
        // Mixing taps: binomial low-pass spatial profile times a random
        // low-rank channel-mixing matrix, with mild per-tap jitter. Low-pass
        // mixing yields spatially smooth maps and the low rank gives the
        // output a small effective dimensionality — both hallmarks of the
        // pretrained backbones this stub stands in for. Full-rank
        // sign-alternating taps would instead produce grid-scale noise that
        // no coarser view of the same image could reproduce.
        // Half the mass on the center tap keeps each cell's own content
        // dominant; the neighbor half still makes features context dependent.
        let nb = 0.5 / 12.0;
        let profile: [f64; 9] =
            [nb, 2.0 * nb, nb, 2.0 * nb, 0.5, 2.0 * nb, nb, 2.0 * nb, nb];
        let rank = (c_out / 3).max(1);
        let a = (2.0 / (c_out * rank) as f64).powf(0.25);
        let u: Vec<f64> = (0..c_out * rank).map(|_| rng.normal() * a).collect();
        let v: Vec<f64> = (0..rank * c_out).map(|_| rng.normal() * a).collect();
        let sigma_mix = (rank as f64).sqrt() * a * a;
        let mut w_mix = Vec::with_capacity(c_out * c_out * 9);
        for o in 0..c_out {
            for i in 0..c_out {
                let m: f64 = (0..rank).map(|r| u[o * rank + r] * v[r * c_out + i]).sum();
                for p in profile {
                    w_mix.push(T::lit(p * (m + rng.normal() * 0.15 * sigma_mix)));
                }
            }
        }
        let b_mix = vec![T::zero(); c_out];
        StubEncoder { patch, c_out, w_patch, w_mix, b_mix }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.c_out
    }

    /// Feature-grid dimensions an `h×w` image would produce.
    pub fn grid_of(&self, h: usize, w: usize) -> Result<(usize, usize), EncoderError> {
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(EncoderError::IndivisibleImage { h, w, patch: self.patch });
        }
        Ok((h / self.patch, w / self.patch))
    }

    /// Encodes an image into a `c_out×(h/p)×(w/p)` feature map.
    pub fn encode(&self, img: &Image<T>) -> Result<FeatureMap<T>, EncoderError> {
        let (gh, gw) = self.grid_of(img.h, img.w)?;
        let p = self.patch;
        let d_in = 3 * p * p;
        let n = gh * gw;

        // Patch vectors as rows: channel-major within each patch.
        let mut rows = vec![T::zero(); n * d_in];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = &mut rows[(gy * gw + gx) * d_in..(gy * gw + gx + 1) * d_in];
                for c in 0..3 {
                    for yy in 0..p {
                        for xx in 0..p {
                            row[(c * p + yy) * p + xx] = img.at(c, gy * p + yy, gx * p + xx);
                        }
                    }
                }
            }
        }

        let zero_bias = vec![T::zero(); self.c_out];
        let proj = kernels::linear_forward(&rows, &self.w_patch, &zero_bias, n, d_in, self.c_out);
        let act = kernels::silu_slice(&proj);
        let spatial = kernels::transpose(&act, n, self.c_out);
        let mixed = conv3x3_replicate(&spatial, &self.w_mix, &self.b_mix, self.c_out, gh, gw);
        Ok(FeatureMap::from_vec(self.c_out, gh, gw, mixed))
    }
}
