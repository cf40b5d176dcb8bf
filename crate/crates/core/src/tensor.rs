//! Dense multi-dimensional arrays with explicit shapes, a deterministic
//! PRNG, and the elementwise/reduction primitives everything else builds on.
//!
//! Layout is row-major in the declared dimension order; rank-4 tensors use
//! batch x height x width x channels. There is no implicit broadcasting
//! except against a single-element tensor.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: &'static str },
    #[error("shape {dims:?} overflows the addressable element count")]
    ElementCountOverflow { dims: Vec<usize> },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("data length {got} does not match shape element count {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("axis {axis} invalid for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("duplicate reduction axis {axis}")]
    DuplicateAxis { axis: usize },
    #[error("standard deviation must be non-negative, got {std}")]
    NegativeStd { std: f64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// Storage precision of a tensor element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Precision {
    F32,
    F64,
}

/// Scalar element type. Implemented for `f32` and `f64`; every kernel in the
/// crate is generic over this so the same code path serves training (f32)
/// and the f64 oracles.
pub trait Element:
    num_traits::Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    const PRECISION: Precision;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Deterministic 64-bit PRNG (SplitMix64) with a normal sampler built from
/// integer and add/mul arithmetic only, so identical seeds give identical
/// streams on every platform.
///
/// Normal deviates use the Irwin-Hall sum of 12 uniforms, which has exactly
/// zero mean and unit variance and needs no transcendental functions.
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed }
    }

    /// Derives an independent stream from `(seed, label)` so e.g. weight
    /// initialization and data shuffling cannot perturb each other.
    pub fn stream(seed: u64, label: u64) -> Self {
        let mut mixer = Prng::new(seed);
        let a = mixer.next_u64();
        Prng::new(a ^ label.wrapping_mul(0xD134_2543_DE82_EF95))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal deviate (Irwin-Hall 12-sum).
    pub fn normal(&mut self) -> f64 {
        let mut s = -6.0;
        for _ in 0..12 {
            s += self.next_f64();
        }
        s
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Normal deviate rejected until it falls within `cutoff` standard
    /// deviations of the mean.
    pub fn truncated_normal(&mut self, mean: f64, std: f64, cutoff: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= cutoff {
                return mean + std * z;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}

/// Ordered list of positive dimensions. For rank-4 data the semantic order
/// is batch, height, width, channels.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Shape(Vec<usize>);

impl core::fmt::Debug for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "rank must be at least 1",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "every dimension must be at least 1",
            });
        }
        let mut count: usize = 1;
        for &d in dims {
            count = count
                .checked_mul(d)
                .ok_or_else(|| TensorError::ElementCountOverflow { dims: dims.to_vec() })?;
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0[axis]
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // dims are all >= 1
    }

    /// Splits a rank-4 shape into (batch, height, width, channels).
    pub fn nhwc(&self) -> Option<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[b, h, w, c] => Some((b, h, w, c)),
            _ => None,
        }
    }

    /// A scalar is represented as shape `[1]`.
    pub fn scalar() -> Shape {
        Shape(vec![1])
    }
}

/// Convenience constructor used throughout the crate; panics on an invalid
/// shape, which for literal dims is a programming error.
pub fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims).expect("literal shape must be valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Initialization schemes for [`make_tensor`].
pub enum Init<'a> {
    Zeros,
    Ones,
    Constant(f64),
    Gaussian { mean: f64, std: f64, prng: &'a mut Prng },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> core::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

pub fn make_tensor<E: Element>(shape: Shape, init: Init) -> Result<Tensor<E>, TensorError> {
    match init {
        Init::Zeros => Ok(Tensor::zeros(shape)),
        Init::Ones => Ok(Tensor::constant(shape, 1.0)),
        Init::Constant(c) => Ok(Tensor::constant(shape, c)),
        Init::Gaussian { mean, std, prng } => Tensor::gaussian(shape, mean, std, prng),
    }
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        let len = shape.len();
        Tensor { shape, data: vec![E::zero(); len] }
    }

    pub fn constant(shape: Shape, c: f64) -> Self {
        let len = shape.len();
        Tensor { shape, data: vec![E::from_f64(c); len] }
    }

    /// Gaussian fill; draws consume the PRNG in flat element order.
    pub fn gaussian(shape: Shape, mean: f64, std: f64, prng: &mut Prng) -> Result<Self, TensorError> {
        if std < 0.0 {
            return Err(TensorError::NegativeStd { std });
        }
        let len = shape.len();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(E::from_f64(prng.normal_scaled(mean, std)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength { expected: shape.len(), got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64s(shape: Shape, data: &[f64]) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength { expected: shape.len(), got: data.len() });
        }
        Ok(Tensor { shape, data: data.iter().map(|&v| E::from_f64(v)).collect() })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![E::from_f64(v)] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value at a multi-index; handy in tests and small kernels.
    pub fn at(&self, idx: &[usize]) -> E {
        debug_assert_eq!(idx.len(), self.shape.rank());
        let mut flat = 0usize;
        for (axis, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape.dim(axis));
            flat = flat * self.shape.dim(axis) + i;
        }
        self.data[flat]
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Flat index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Elementwise combination of two same-shaped tensors. The only
    /// broadcasting rule is a single-element `other`, treated as a scalar.
    pub fn map_zip(&self, other: &Self, op: BinOp) -> Result<Self, TensorError> {
        let apply = |a: E, b: E| -> E {
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Max => if a > b { a } else { b },
            }
        };
        if other.len() == 1 && self.shape != other.shape {
            let b = other.data[0];
            let data = self.data.iter().map(|&a| apply(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.dims().to_vec(),
                right: other.shape.dims().to_vec(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| apply(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Self {
        let s = E::from_f64(s);
        self.map(|v| v * s)
    }

    /// Reduces over `axes` (removed from the result); reducing every axis
    /// yields shape `[1]`. Accumulation always visits elements in ascending
    /// flat order, which keeps sums bitwise reproducible.
    pub fn reduce(&self, axes: &[usize], kind: Reduction) -> Result<Self, TensorError> {
        let rank = self.shape.rank();
        let mut reduce_mask = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            if reduce_mask[axis] {
                return Err(TensorError::DuplicateAxis { axis });
            }
            reduce_mask[axis] = true;
        }
        let out_dims: Vec<usize> = (0..rank)
            .filter(|&a| !reduce_mask[a])
            .map(|a| self.shape.dim(a))
            .collect();
        let out_shape = if out_dims.is_empty() { Shape::scalar() } else { Shape::new(&out_dims)? };
        let out_len = out_shape.len();

        let init = match kind {
            Reduction::Sum | Reduction::Mean => E::zero(),
            Reduction::Max => E::neg_infinity(),
        };
        let mut out = vec![init; out_len];

        // Per-axis strides of the output index each input element maps to.
        let mut out_stride = vec![0usize; rank];
        {
            let mut s = 1usize;
            for axis in (0..rank).rev() {
                if !reduce_mask[axis] {
                    out_stride[axis] = s;
                    s *= self.shape.dim(axis);
                }
            }
        }

        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0usize;
            for axis in 0..rank {
                o += idx[axis] * out_stride[axis];
            }
            match kind {
                Reduction::Sum | Reduction::Mean => out[o] = out[o] + v,
                Reduction::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
            }
            // advance multi-index, row-major
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape.dim(axis) {
                    break;
                }
                idx[axis] = 0;
            }
        }

        if kind == Reduction::Mean {
            let count: usize = (0..rank).filter(|&a| reduce_mask[a]).map(|a| self.shape.dim(a)).product();
            let inv = E::from_f64(1.0 / count as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        Ok(Tensor { shape: out_shape, data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant_fill() {
        let t = Tensor::<f64>::zeros(shape(&[2, 2]));
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::constant(shape(&[3]), 1.5);
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn gaussian_is_deterministic_per_seed() {
        let mut a = Prng::new(42);
        let mut b = Prng::new(42);
        let ta = Tensor::<f64>::gaussian(shape(&[4]), 0.0, 1.0, &mut a).unwrap();
        let tb = Tensor::<f64>::gaussian(shape(&[4]), 0.0, 1.0, &mut b).unwrap();
        assert_eq!(ta.data(), tb.data());
        let tc = Tensor::<f64>::gaussian(shape(&[4]), 0.0, 1.0, &mut a).unwrap();
        assert_ne!(ta.data(), tc.data());
    }

    #[test]
    fn gaussian_rejects_negative_std() {
        let mut p = Prng::new(1);
        assert!(matches!(
            Tensor::<f64>::gaussian(shape(&[2]), 0.0, -1.0, &mut p),
            Err(TensorError::NegativeStd { .. })
        ));
    }

    #[test]
    fn shape_validation() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(Shape::new(&[usize::MAX, 2]).is_err());
        assert_eq!(Shape::new(&[2, 3]).unwrap().len(), 6);
    }

    #[test]
    fn map_zip_basics() {
        let a = Tensor::<f64>::from_f64s(shape(&[2]), &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64s(shape(&[2]), &[3.0, 4.0]).unwrap();
        assert_eq!(a.map_zip(&b, BinOp::Add).unwrap().data(), &[4.0, 6.0]);

        let zero = Tensor::<f64>::scalar(0.0);
        assert_eq!(a.map_zip(&zero, BinOp::Mul).unwrap().data(), &[0.0, 0.0]);

        let x = Tensor::<f64>::from_f64s(shape(&[2]), &[-1.0, 5.0]).unwrap();
        let floor = Tensor::<f64>::from_f64s(shape(&[2]), &[0.0, 0.0]).unwrap();
        assert_eq!(x.map_zip(&floor, BinOp::Max).unwrap().data(), &[0.0, 5.0]);

        let c = Tensor::<f64>::zeros(shape(&[3]));
        assert!(a.map_zip(&c, BinOp::Add).is_err());
    }

    #[test]
    fn reduce_basics() {
        let t = Tensor::<f64>::from_f64s(shape(&[2, 2]), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.reduce(&[0], Reduction::Sum).unwrap();
        assert_eq!(s.shape().dims(), &[2]);
        assert_eq!(s.data(), &[4.0, 6.0]);

        let m = t.reduce(&[0, 1], Reduction::Mean).unwrap();
        assert_eq!(m.shape().dims(), &[1]);
        assert_eq!(m.data(), &[2.5]);

        assert!(t.reduce(&[2], Reduction::Sum).is_err());
        assert!(t.reduce(&[0, 0], Reduction::Sum).is_err());
    }

    #[test]
    fn reduce_max_matches_flat_scan() {
        let mut p = Prng::new(7);
        let t = Tensor::<f64>::gaussian(shape(&[3, 4, 5]), 0.0, 2.0, &mut p).unwrap();
        let m = t.reduce(&[0, 1, 2], Reduction::Max).unwrap();
        let scan = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.data()[0], scan);
    }

    #[test]
    fn reduce_mid_axis() {
        // [2,3,2] reduced over axis 1
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = Tensor::<f64>::from_f64s(shape(&[2, 3, 2]), &data).unwrap();
        let s = t.reduce(&[1], Reduction::Sum).unwrap();
        assert_eq!(s.shape().dims(), &[2, 2]);
        assert_eq!(s.data(), &[6.0, 9.0, 24.0, 27.0]); // columns summed
    }

    #[test]
    fn prng_streams_are_independent_of_each_other() {
        let init = Prng::stream(9, 0).next_u64();
        let shuffle = Prng::stream(9, 1).next_u64();
        assert_ne!(init, shuffle);
        assert_eq!(init, Prng::stream(9, 0).next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut p = Prng::new(3);
        let mut xs: Vec<usize> = (0..100).collect();
        p.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(xs, (0..100).collect::<Vec<_>>());
    }
}
