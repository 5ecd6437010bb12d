//! 2D scalar images in line-integral units.

use crate::error::{invalid_arg, Result};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::Vector2;

/// A detector-sized scalar image, row-major (x fastest), `f32` storage to
/// match the raw file payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixel_spacing: f64,
    data: Vec<f32>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, pixel_spacing: f64, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid_arg!("image dimensions must be nonzero"));
        }
        if pixel_spacing <= 0.0 || !pixel_spacing.is_finite() {
            return Err(invalid_arg!("pixel spacing must be positive"));
        }
        if data.len() != width * height {
            return Err(invalid_arg!(
                "data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg!("image values must be finite"));
        }
        Ok(Self { width, height, pixel_spacing, data })
    }

    pub fn zeros(width: usize, height: usize, pixel_spacing: f64) -> Result<Self> {
        Self::new(width, height, pixel_spacing, vec![0.0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0f32, f32::max)
    }

    /// Index of the pixel containing a continuous detector coordinate, or
    /// `None` when it falls off the image.
    pub fn pixel_index(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let (x, y) = (p.x as usize, p.y as usize);
        // Coordinates exactly on the far edge belong to the last pixel.
        let x = x.min(self.width.saturating_sub(1));
        let y = y.min(self.height.saturating_sub(1));
        if p.x > self.width as f64 || p.y > self.height as f64 {
            None
        } else {
            Some((x, y))
        }
    }
}
