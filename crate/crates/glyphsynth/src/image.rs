//! Binary glyph bitmaps. Pixel value 1 is ink, 0 is background.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GlyphImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p > 1) {
            return Err(Error::Data(format!(
                "image pixels must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn random<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let mut pixels = vec![0u8; height * width];
        rng.fill(pixels.as_mut_slice());
        for p in &mut pixels {
            *p &= 1;
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        debug_assert!(value <= 1);
        self.pixels[row * self.width + col] = value;
    }

    /// Fraction of ink pixels.
    pub fn ink_ratio(&self) -> f64 {
        let ink: u64 = self.pixels.iter().map(|&p| p as u64).sum();
        ink as f64 / self.pixels.len() as f64
    }

    pub fn count_diff(&self, other: &GlyphImage) -> usize {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count()
    }
}
