use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Planar image, `[channels, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || height == 0 || width == 0 {
            return Err(Error::Shape(alloc::format!(
                "image must be 1 or 3 channels with positive size, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(alloc::format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Constant image. Panics on invalid dimensions.
    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("valid image dims")
    }

    pub fn from_gray_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(1, height, width, pixels.iter().map(|&p| f32::from(p) / 255.0).collect())
    }

    /// Quantizes channel 0 (or the luma of an RGB image) to 8 bits.
    pub fn to_gray_u8(&self) -> Vec<u8> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
        let plane = self.height * self.width;
        if self.channels == 1 {
            self.data.iter().map(|&v| q(v)).collect()
        } else {
            (0..plane)
                .map(|i| q(0.299 * self.data[i] + 0.587 * self.data[plane + i] + 0.114 * self.data[2 * plane + i]))
                .collect()
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}
