//! Dense `f32` tensors, the layer kernels built on them, and a tape-based
//! reverse-mode autodiff engine.
//!
//! Everything here works on single samples: images are `[C, H, W]`, vectors
//! are `[n]`. There is no batch dimension.

mod gradcheck;
pub mod ops;
mod optim;
mod param;
mod tape;

pub use gradcheck::{grad_check, GradCheck};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamKey, ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Derives an independent seed for sub-stream `stream` (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one extent".into()));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape(format!(
            "extent {pos} of {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {len} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    /// A rank-1 tensor. Panics on an empty vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "rank-1 tensor needs at least one element");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![value])
    }

    /// Gaussian samples with mean 0, deterministic in `(shape, seed, stddev)`.
    pub fn random_normal(shape: &[usize], seed: u64, stddev: f32) -> Result<Self> {
        let len = validate_shape(shape)?;
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::Config(format!(
                "standard deviation must be positive, got {stddev}"
            )));
        }
        let normal = Normal::new(0.0f32, stddev).expect("validated stddev");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform samples in `[low, high)`.
    pub fn random_uniform(shape: &[usize], seed: u64, low: f32, high: f32) -> Result<Self> {
        let len = validate_shape(shape)?;
        if !(low < high) {
            return Err(Error::Config(format!("empty range [{low}, {high})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len).map(|_| rng.random_range(low..high)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Index of the largest element; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}
