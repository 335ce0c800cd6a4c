use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f64` in row-major order.
///
/// Four-dimensional activations use `(batch, channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)` from a seeded ChaCha stream.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Destructures a 4-D shape, failing for any other rank.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                "tensor",
                format!("expected a 4-D tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Splits a 4-D tensor along channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = self.dims4()?;
        if at > c {
            return Err(Error::shape(
                "split_channels",
                format!("split point {at} exceeds {c} channels"),
            ));
        }
        let plane = h * w;
        let mut lo = Vec::with_capacity(b * at * plane);
        let mut hi = Vec::with_capacity(b * (c - at) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            lo.extend_from_slice(&self.data[base..base + at * plane]);
            hi.extend_from_slice(&self.data[base + at * plane..base + c * plane]);
        }
        Ok((
            Tensor::new(&[b, at, h, w], lo)?,
            Tensor::new(&[b, c - at, h, w], hi)?,
        ))
    }

    /// Stacks `(1, C, H, W)` or `(C, H, W)`-compatible tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack_batch", "no tensors to stack"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut batch = 0;
        for t in items {
            let (b, c2, h2, w2) = t.dims4()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", first.shape, t.shape),
                ));
            }
            batch += b;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[batch, c, h, w], data)
    }

    /// Extracts batch item `i` as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if i >= b {
            return Err(Error::shape(
                "batch_item",
                format!("index {i} out of batch {b}"),
            ));
        }
        let n = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[i * n..(i + 1) * n].to_vec())
    }
}
