//! Dense row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{bail, ensure, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Set on graph leaves whose gradient should be tracked.
    pub requires_grad: bool,
    /// Filled by [`crate::graph::Graph::backward`]; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Config,
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Dimensions as `(B, C, H, W)`; errors unless the tensor has rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => bail!(Config, "expected a (B, C, H, W) tensor, got shape {:?}", self.shape),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), requires_grad: false, grad: None }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and payload (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sample `b` of a batched tensor, keeping a leading batch dimension of 1.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        ensure!(!self.shape.is_empty() && b < self.shape[0], Config, "batch index {} out of range for {:?}", b, self.shape);
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::new(&shape, self.data[b * per..(b + 1) * per].to_vec())
    }

    /// Stack equally-shaped tensors that each carry a leading batch dim of 1.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        ensure!(!items.is_empty(), Config, "cannot stack an empty batch");
        let inner = &items[0].shape[1..];
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            ensure!(t.shape[0] == 1 && &t.shape[1..] == inner, Config, "stack_batch shape mismatch {:?}", t.shape);
            data.extend_from_slice(&t.data);
        }
        let mut shape = items[0].shape.clone();
        shape[0] = items.len();
        Self::new(&shape, data)
    }

    /// Average pooling of a `(B, C, H, W)` tensor by an integer factor.
    pub fn avg_pool(&self, factor: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        ensure!(factor > 0 && h % factor == 0 && w % factor == 0, Config, "pool factor {} does not divide {}x{}", factor, h, w);
        let (oh, ow) = (h / factor, w / factor);
        let norm = (factor * factor) as f64;
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &self.data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / factor) * ow + x / factor] += src[y * w + x];
                }
            }
            dst.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(&[b, c, oh, ow], out)
    }

    /// Channel index of the maximum value at every `(b, y, x)` of a `(B, C, H, W)` tensor.
    /// Ties resolve to the lowest channel.
    pub fn argmax_channels(&self) -> Result<Vec<Vec<u32>>> {
        let (b, c, h, w) = self.dims4()?;
        let hw = h * w;
        Ok((0..b)
            .map(|bi| {
                (0..hw)
                    .map(|p| {
                        let mut best = 0;
                        let mut best_v = f64::NEG_INFINITY;
                        for ci in 0..c {
                            let v = self.data[(bi * c + ci) * hw + p];
                            if v > best_v {
                                best_v = v;
                                best = ci;
                            }
                        }
                        best as u32
                    })
                    .collect()
            })
            .collect())
    }
}
