//! Raster images in model space.
//!
//! Pixels are stored row-major, channel-interleaved (`H x W x C`). Model space
//! is `[-1, 1]`; 8-bit and `[0, 1]` values only appear at I/O and metric
//! boundaries.

use candle_core::{DType, Device, Tensor};

use crate::error::contract;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(contract(format!(
                "image dimensions must be nonzero, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(contract(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Model space `[-1, 1]` to `[0, 1]`.
    pub fn to_unit(&self) -> Self {
        self.map(|v| (v + 1.0) * 0.5)
    }

    /// `[0, 1]` to model space.
    pub fn from_unit(&self) -> Self {
        self.map(|v| v * 2.0 - 1.0)
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Values of one channel in raster order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), &Device::Cpu)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .contiguous()?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `1 x C x H x W` or `C x H x W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(contract(format!("expected a single CHW image tensor, got {:?}", t.shape()))),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(h, w, c, data)
    }
}
