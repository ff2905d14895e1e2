//! Planar-free RGB float images.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::round;

/// `height × width × 3` array of linear RGB values, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Per-pixel mean of the three channels.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Rounds each clamped channel to the nearest of 256 levels.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Option<Image> {
        if bytes.len() != width * height * 3 {
            return None;
        }
        Some(Image { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    /// Image quantized to 8 bits and back.
    pub fn quantized(&self) -> Image {
        Image::from_u8(self.width, self.height, &self.to_u8()).unwrap()
    }

    /// Mean absolute difference over every channel value.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f64
    }
}

/// A compact 8-bit frame, the storage form of ground-truth sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame8 {
    pub fn from_image(img: &Image) -> Self {
        Frame8 { width: img.width, height: img.height, data: img.to_u8() }
    }

    pub fn to_image(&self) -> Image {
        Image::from_u8(self.width, self.height, &self.data).unwrap()
    }
}
