//! Attention-based feature upsampler.
//!
//! Takes a coarse feature map from a frozen encoder together with the
//! high-resolution image it came from, and predicts features on an arbitrary
//! target grid by cross-attending image-derived queries against
//! feature-modulated keys. Training needs no annotations: the model learns
//! from multi-resolution views of procedurally generated images, supervised
//! by the encoder's own output at the higher resolution.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]);
//! production code uses the `f32` aliases exported at the crate root, while
//! the gradient-check oracle instantiates the same code at `f64`.

pub mod cli;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod model;
mod kernels;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type FeatureMap32 = tensor::FeatureMap<f32>;
pub type FeatureMap64 = tensor::FeatureMap<f64>;
pub type SaliencyMap32 = tensor::SaliencyMap<f32>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
