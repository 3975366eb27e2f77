//! 8-bit raster types: RGB images, grayscale maps and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary segmentation mask; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "mask",
                format!("{width}×{height} needs {} values, got {}", width * height, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = u8::from(on);
    }

    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.values.len() as f64
    }

    /// Nearest-neighbour resize sampling the source pixel nearest each target
    /// pixel centre.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Mask::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y) == 1
        })
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y) == 1)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.values.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect(),
        }
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                "rgb_image",
                format!("{width}×{height}×3 needs {} bytes, got {}", width * height * 3, pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Converts to an `H×W×3` tensor with `(v/255 − mean[c]) / std[c]`.
    pub fn to_tensor(&self, norm: &Normalization) -> Tensor {
        let data = self
            .pixels
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| (px[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c]))
            .collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("rgb tensor shape")
    }
}

/// Per-channel normalization constants applied to network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }
}

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "gray_image",
                format!("{width}×{height} needs {} bytes, got {}", width * height, pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    /// Quantizes a probability map in `[0,1]` as `round(255·p)`.
    pub fn from_probabilities(width: usize, height: usize, probs: &[f64]) -> Result<Self> {
        let pixels = probs.iter().map(|p| (255.0 * p.clamp(0.0, 1.0)).round() as u8).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Interprets 0 as background and 255 as foreground; anything else is
    /// rejected.
    pub fn to_mask(&self) -> Result<Mask> {
        let values = self
            .pixels
            .iter()
            .map(|&v| match v {
                0 => Ok(0),
                255 => Ok(1),
                other => Err(Error::Pnm(format!("mask pixel value {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Mask::new(self.width, self.height, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(Mask::new(2, 1, vec![0, 2]).is_err());
        assert!(Mask::new(2, 1, vec![0]).is_err());
    }

    #[test]
    fn nearest_downsample_picks_block_centres() {
        // 4×4 → 2×2 samples pixels (1,1), (3,1), (1,3), (3,3).
        let m = Mask::from_fn(4, 4, |x, y| x == 3 && y == 1);
        let d = m.resize_nearest(2, 2);
        assert_eq!(d.values(), &[0, 1, 0, 0]);
    }

    #[test]
    fn probability_quantization_rounds() {
        let g = GrayImage::from_probabilities(3, 1, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(g.pixels(), &[0, 128, 255]);
    }

    #[test]
    fn gray_mask_round_trip() {
        let m = Mask::new(3, 1, vec![1, 0, 1]).unwrap();
        assert_eq!(m.to_gray().to_mask().unwrap(), m);
        assert!(GrayImage::new(1, 1, vec![7]).unwrap().to_mask().is_err());
    }
}
