//! Train-time augmentation: joint horizontal flip, random crop and resize
//! back to the original size. Normalization happens at tensor conversion
//! ([`crate::image::RgbImage::to_tensor`]) with constants from the model
//! config, so train and test inputs share it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    /// Smallest crop side as a fraction of the image side.
    pub min_crop_fraction: f64,
    /// Feature-grid side used to check that both classes survive.
    pub feature_size: usize,
    pub max_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            min_crop_fraction: 0.75,
            feature_size: 16,
            max_attempts: 10,
        }
    }
}

/// Axis-aligned square crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

pub fn sample_crop_window(width: usize, height: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> CropWindow {
    let side = width.min(height);
    let lo = ((cfg.min_crop_fraction * side as f64).round() as usize).clamp(1, side);
    let size = rng.gen_range(lo..=side);
    CropWindow {
        x: rng.gen_range(0..=width - size),
        y: rng.gen_range(0..=height - size),
        size,
    }
}

fn resize_crop_rgb(image: &RgbImage, win: CropWindow, out_w: usize, out_h: usize) -> RgbImage {
    let mut out = RgbImage::filled(out_w, out_h, [0, 0, 0]);
    let scale = win.size as f64 / out_w as f64;
    let scale_y = win.size as f64 / out_h as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (win.size - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(win.size - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (win.size - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(win.size - 1);
            let fx = sx - x0 as f64;
            let p = |x: usize, y: usize| image.get(win.x + x, win.y + y);
            let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
            let px = std::array::from_fn(|ch| {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                (top * (1.0 - fy) + bottom * fy).round() as u8
            });
            out.set(ox, oy, px);
        }
    }
    out
}

fn resize_crop_mask(mask: &Mask, win: CropWindow, out_w: usize, out_h: usize) -> Mask {
    let scale_x = win.size as f64 / out_w as f64;
    let scale_y = win.size as f64 / out_h as f64;
    Mask::from_fn(out_w, out_h, |x, y| {
        let sx = (((x as f64 + 0.5) * scale_x) as usize).min(win.size - 1);
        let sy = (((y as f64 + 0.5) * scale_y) as usize).min(win.size - 1);
        mask.get(win.x + sx, win.y + sy) == 1
    })
}

fn both_classes_survive(mask: &Mask, feature_size: usize) -> bool {
    let coarse = mask.resize_nearest(feature_size, feature_size);
    let fg = coarse.foreground_count();
    fg > 0 && fg < coarse.values().len()
}

/// Applies a random flip and crop/resize jointly to image and mask. Crops
/// that would lose either class at feature resolution are redrawn; after
/// `max_attempts` failures only the flip is applied.
pub fn augment(image: &RgbImage, mask: &Mask, cfg: &AugmentConfig, rng: &mut impl Rng) -> (RgbImage, Mask) {
    let (mut image, mut mask) = if rng.gen_bool(cfg.flip_probability) {
        (image.flip_horizontal(), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    };
    let (w, h) = (image.width(), image.height());
    for _ in 0..cfg.max_attempts {
        let win = sample_crop_window(w, h, cfg, rng);
        let cropped_mask = resize_crop_mask(&mask, win, w, h);
        if both_classes_survive(&cropped_mask, cfg.feature_size) {
            image = resize_crop_rgb(&image, win, w, h);
            mask = cropped_mask;
            break;
        }
    }
    (image, mask)
}
