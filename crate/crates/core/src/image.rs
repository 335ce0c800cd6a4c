use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What an image stands for in the reconstruction pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Fully-sampled T2 reference.
    Target,
    /// Zero-filled reconstruction of subsampled T2 k-space.
    SubsampledInput,
    Flair,
    Prediction,
    #[default]
    Unspecified,
}

/// Real-valued 2-D grid, row-major. Pipeline images live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    role: Role,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} image needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
            role: Role::Unspecified,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
            role: Role::Unspecified,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
            role: Role::Unspecified,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
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

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Rounds every value to the nearest `f32`, making the image exactly
    /// representable in the raw file format.
    pub fn quantize_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }

    pub(crate) fn check_same_shape(&self, other: &Image, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `(1, 1, H, W)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("consistent extents")
    }

    /// Extracts batch item `i`, channel 0, of a `(B, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, i: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if i >= b {
            return Err(Error::shape("image", format!("batch index {i} out of {b}")));
        }
        let start = i * c * h * w;
        Image::new(h, w, t.data()[start..start + h * w].to_vec())
    }

    /// Horizontal concatenation, used for side-by-side previews.
    pub fn hstack(images: &[&Image]) -> Result<Image> {
        let h = images.first().map(|i| i.height).unwrap_or(0);
        if images.iter().any(|i| i.height != h) {
            return Err(Error::shape("hstack", "images differ in height"));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for img in images {
                data.extend_from_slice(&img.data[y * img.width..(y + 1) * img.width]);
            }
        }
        Image::new(h, w, data)
    }
}
