//! Dense row-major `f32` tensors, shapes, and the seeded generator every
//! other module draws randomness from.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape must have at least one dimension")]
    EmptyShape,
    #[error("element count of shape {0:?} overflows usize")]
    ShapeOverflow(Vec<usize>),
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("shape {shape} holds {expected} values, got {got}")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("distribution parameter must be positive and finite, got {0}")]
    BadParameter(f32),
}

/// Tensor dimensions, outermost first.
///
/// Zero-length dimensions are allowed so that empty batches and empty code
/// vectors have a shape; rank zero is not.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(TensorError::EmptyShape);
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::ShapeOverflow(dims.clone()))?;
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Full-precision tensor. Values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.numel()];
        Self { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                got: data.len(),
                shape,
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    /// Builds a rank-1 tensor.
    pub fn from_slice(values: &[f32]) -> Result<Self, TensorError> {
        Self::from_vec(Shape::new([values.len()])?, values.to_vec())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Callers inside the crate must keep the values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                got: self.data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, TensorError> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `alpha * x + y`.
    pub fn axpy(alpha: f32, x: &Self, y: &Self) -> Result<Self, TensorError> {
        x.zip_with(y, |a, b| alpha * a + b)
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v.abs())).sum::<f64>() / self.data.len() as f64
    }
}

fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// SplitMix64 generator.
///
/// The n-th output is `mix(seed + n * 0x9E3779B97F4A7C15)` with the standard
/// SplitMix64 finalizer, so the stream depends only on integer arithmetic.
/// Uniform floats take the top 24 (f32) or 53 (f64) bits. Normal deviates use
/// Box-Muller with the pure-Rust `libm` transcendentals, which keeps them
/// bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, bound)` by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() needs a positive bound");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Independent generator for a named sub-stream.
    pub fn fork(&mut self, stream: u64) -> Rng {
        Rng::new(self.next_u64() ^ stream.wrapping_mul(GOLDEN_GAMMA))
    }
}

/// Values uniform in `[-a, a]`.
pub fn sample_uniform(rng: &mut Rng, shape: Shape, a: f32) -> Result<DenseTensor, TensorError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(TensorError::BadParameter(a));
    }
    let data = (0..shape.numel())
        .map(|_| a * (2.0 * rng.next_f32() - 1.0))
        .collect();
    Ok(DenseTensor { shape, data })
}

/// Values drawn from `N(0, sigma^2)`.
pub fn sample_normal(rng: &mut Rng, shape: Shape, sigma: f32) -> Result<DenseTensor, TensorError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TensorError::BadParameter(sigma));
    }
    let s = f64::from(sigma);
    let data = (0..shape.numel()).map(|_| (s * rng.normal()) as f32).collect();
    Ok(DenseTensor { shape, data })
}
