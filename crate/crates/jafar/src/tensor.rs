//! Dense value types: n-dimensional tensors, feature maps and saliency maps.
//!
//! A [`Tensor`] is a flat row-major buffer plus a shape (rank 1 to 4 in
//! practice). [`FeatureMap`] is the channel-major `C×H×W` grid the upsampler
//! consumes and produces; [`SaliencyMap`] is a single-channel `H×W` map used
//! by the attention export and the faithfulness metrics.

use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of zeros with the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    /// Tensor filled with one value.
    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Wraps an existing buffer; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not hold {} elements", data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    /// Tensor of i.i.d. normal draws scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    /// Element-wise cast to another scalar type (via `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.wide())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Channel-major `C×H×W` grid of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(c * h * w, data.len(), "feature map {c}x{h}x{w} needs {} values", c * h * w);
        FeatureMap { c, h, w, data }
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        assert_eq!(t.shape().len(), 3, "feature maps are rank 3, got {:?}", t.shape());
        FeatureMap {
            c: t.shape()[0],
            h: t.shape()[1],
            w: t.shape()[2],
            data: t.data().to_vec(),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// One channel plane as a contiguous slice.
    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// The feature vector at one grid location.
    pub fn vector_at(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.c).map(|c| self.at(c, y, x)).collect()
    }

    /// View as a `[C, H*W]` tensor (same layout, no copy of semantics).
    pub fn to_2d(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.c, self.h * self.w], self.data.clone())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.c, self.h, self.w], self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| U::lit(v.wide())).collect(),
        }
    }
}

/// Single-channel `H×W` map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T: Scalar> {
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(h * w, data.len(), "saliency map {h}x{w} needs {} values", h * w);
        SaliencyMap { h, w, data }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_and_numel_agree() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4]);
        assert_eq!(t.shape(), &[2, 3, 4]);
        assert_eq!(t.numel(), 24);
    }

    #[test]
    #[should_panic(expected = "does not hold")]
    fn tensor_from_vec_rejects_wrong_length() {
        let _ = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]);
    }

    #[test]
    fn feature_map_indexing_is_channel_major() {
        let mut f = FeatureMap::<f32>::zeros(2, 2, 3);
        f.set(1, 0, 2, 7.0);
        assert_eq!(f.data()[1 * 6 + 0 * 3 + 2], 7.0);
        assert_eq!(f.at(1, 0, 2), 7.0);
        assert_eq!(f.vector_at(0, 2), vec![0.0, 7.0]);
    }

    #[test]
    fn cast_round_trips_f32_values_exactly() {
        let mut rng = Rng::new(1);
        let t = Tensor::<f32>::randn(&[3, 3], 1.0, &mut rng);
        let back: Tensor<f32> = t.cast::<f64>().cast::<f32>();
        assert_eq!(t, back);
    }
}
