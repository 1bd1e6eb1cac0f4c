//! Dense row-major `f64` tensors and convolution kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Maximum supported rank (batch × channel × height × width).
pub const MAX_RANK: usize = 4;

/// Dense row-major array of `f64` with at most four dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > MAX_RANK {
            return Err(Error::RankTooLarge(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect())
    }

    /// A `1×1×H×W` tensor from a row-major raster.
    pub fn from_raster(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, 1, height, width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Interprets the tensor as `B×C×H×W`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Border handling for spatial operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Clamp sample coordinates to the nearest edge pixel.
    #[default]
    Replicate,
}

/// How a convolution kernel connects input and output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// One `k×k` kernel applied to every channel independently.
    Shared,
    /// One `k×k` kernel per channel; weights are `C×1×k×k`.
    Depthwise,
    /// Full channel mixing; weights are `C_out×C_in×k×k`.
    Dense,
}

/// Square, odd-sized, dilated correlation kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    weights: Tensor,
    dilation: usize,
    grouping: Grouping,
}

impl Kernel2D {
    /// `weights` must be `O×I×k×k` with `k` odd; `O = I = 1` for
    /// [`Grouping::Shared`] and `I = 1` for [`Grouping::Depthwise`].
    pub fn new(weights: Tensor, dilation: usize, grouping: Grouping) -> Result<Self> {
        let [o, i, kh, kw] = weights.dims4("kernel")?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "kernel",
                alloc::format!("kernel must be square and odd, got {kh}×{kw}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::invalid("kernel", "dilation must be at least 1"));
        }
        let ok = match grouping {
            Grouping::Shared => o == 1 && i == 1,
            Grouping::Depthwise => i == 1,
            Grouping::Dense => true,
        };
        if !ok {
            return Err(Error::invalid(
                "kernel",
                alloc::format!("weights {:?} do not fit {grouping:?} grouping", weights.shape()),
            ));
        }
        Ok(Self {
            weights,
            dilation,
            grouping,
        })
    }

    /// Kernel applied identically to every channel.
    pub fn shared(size: usize, weights: Vec<f64>, dilation: usize) -> Result<Self> {
        Self::new(Tensor::new(vec![1, 1, size, size], weights)?, dilation, Grouping::Shared)
    }

    /// Centered delta (identity) kernel replicated across `channels`.
    pub fn delta_depthwise(channels: usize, size: usize, dilation: usize) -> Result<Self> {
        let centre = (size / 2) * size + size / 2;
        let w = Tensor::from_fn(
            vec![channels, 1, size, size],
            |i| {
                if i % (size * size) == centre {
                    1.0
                } else {
                    0.0
                }
            },
        )?;
        Self::new(w, dilation, Grouping::Depthwise)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }

    /// `(k − 1)·r + 1`.
    pub fn receptive_field(&self) -> usize {
        (self.size() - 1) * self.dilation + 1
    }

    pub fn with_weights(&self, weights: Tensor) -> Result<Self> {
        Self::new(weights, self.dilation, self.grouping)
    }
}
