//! Procedural multi-part objects on cluttered backgrounds.
//!
//! Each of the 16 categories is a fixed composite of 2–4 parts that differ in
//! outline, colour and texture. A render places one instance of the target
//! composite at a random pose over a gradient background littered with parts
//! borrowed from other categories. Only the target's pixels enter the mask.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::seed;

pub const NUM_CATEGORIES: usize = 16;
pub const MIN_AREA_FRACTION: f64 = 0.05;
pub const MAX_AREA_FRACTION: f64 = 0.6;
const MAX_ATTEMPTS: u64 = 256;
const CATEGORY_STREAM: u64 = 0x5EED_CA7E;

const PALETTE: [[u8; 3]; 10] = [
    [220, 40, 40],
    [40, 170, 60],
    [50, 80, 220],
    [235, 200, 40],
    [170, 60, 200],
    [40, 200, 210],
    [240, 130, 30],
    [245, 245, 245],
    [30, 30, 30],
    [140, 90, 40],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Dots,
}

/// One part of a composite, in object coordinates (pixels at scale 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub shape: ShapeKind,
    pub texture: Texture,
    pub color: [u8; 3],
    pub accent: [u8; 3],
    pub offset: [f64; 2],
    pub radii: [f64; 2],
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub parts: Vec<PartSpec>,
}

/// Deterministic template for a category id.
pub fn category_spec(id: usize) -> Result<CategorySpec> {
    if id >= NUM_CATEGORIES {
        return Err(Error::InvalidArgument(format!(
            "category id {id} outside [0, {NUM_CATEGORIES})"
        )));
    }
    let mut rng = seed::rng(seed::derive(CATEGORY_STREAM, id as u64));
    let n_parts = 2 + id % 3;
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(&mut rng);
    let shapes = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Diamond];
    let textures = [
        Texture::Solid,
        Texture::HorizontalStripes,
        Texture::VerticalStripes,
        Texture::Checker,
        Texture::Dots,
    ];
    let base_angle = rng.gen_range(0.0..2.0 * PI);
    let parts = (0..n_parts)
        .map(|p| {
            let radii = [rng.gen_range(5.0..8.0), rng.gen_range(4.0..7.0)];
            // Parts sit on a ring around the object centre, close enough to touch.
            let theta = base_angle + 2.0 * PI * p as f64 / n_parts as f64 + rng.gen_range(-0.3..0.3);
            let ring = rng.gen_range(4.5..6.5);
            let color = PALETTE[colors[p]];
            let accent = PALETTE[colors[(p + n_parts) % PALETTE.len()]];
            PartSpec {
                shape: *shapes.choose(&mut rng).unwrap(),
                texture: *textures.choose(&mut rng).unwrap(),
                color,
                accent,
                offset: [ring * theta.cos(), ring * theta.sin()],
                radii,
                angle: rng.gen_range(0.0..PI),
            }
        })
        .collect();
    Ok(CategorySpec { id, parts })
}

pub fn all_categories() -> Vec<CategorySpec> {
    (0..NUM_CATEGORIES).map(|id| category_spec(id).expect("id in range")).collect()
}

/// Placement of a part (or whole composite) in image coordinates.
#[derive(Debug, Clone, Copy)]
struct Pose {
    center: [f64; 2],
    scale: f64,
    angle: f64,
}

impl Pose {
    /// Maps an image point into the posed frame's unscaled coordinates.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        ((c * dx + s * dy) / self.scale, (-s * dx + c * dy) / self.scale)
    }
}

fn inside(shape: ShapeKind, u: f64, v: f64, radii: [f64; 2]) -> bool {
    let (a, b) = (u / radii[0], v / radii[1]);
    match shape {
        ShapeKind::Ellipse => a * a + b * b <= 1.0,
        ShapeKind::Rectangle => a.abs() <= 1.0 && b.abs() <= 1.0,
        ShapeKind::Diamond => a.abs() + b.abs() <= 1.0,
        // Apex at the top, base at the bottom.
        ShapeKind::Triangle => (-1.0..=1.0).contains(&b) && a.abs() <= (b + 1.0) / 2.0,
    }
}

fn texture_is_accent(texture: Texture, u: f64, v: f64) -> bool {
    const PERIOD: f64 = 3.0;
    let cell = |t: f64| (t / PERIOD).floor() as i64;
    match texture {
        Texture::Solid => false,
        Texture::HorizontalStripes => cell(v).rem_euclid(2) == 1,
        Texture::VerticalStripes => cell(u).rem_euclid(2) == 1,
        Texture::Checker => (cell(u) + cell(v)).rem_euclid(2) == 1,
        Texture::Dots => {
            let du = u.rem_euclid(2.0 * PERIOD) - PERIOD;
            let dv = v.rem_euclid(2.0 * PERIOD) - PERIOD;
            du * du + dv * dv <= 2.5
        }
    }
}

fn jitter(color: [u8; 3], delta: [i32; 3]) -> [u8; 3] {
    std::array::from_fn(|c| (color[c] as i32 + delta[c]).clamp(0, 255) as u8)
}

/// Paints one part; returns whether pixel `(x, y)` was covered, via `cover`.
fn paint_part(image: &mut RgbImage, part: &PartSpec, pose: &Pose, color_delta: [i32; 3], mut cover: impl FnMut(usize, usize)) {
    let (w, h) = (image.width(), image.height());
    for y in 0..h {
        for x in 0..w {
            let (ou, ov) = pose.local(x as f64 + 0.5, y as f64 + 0.5);
            let (du, dv) = (ou - part.offset[0], ov - part.offset[1]);
            let (s, c) = part.angle.sin_cos();
            let (u, v) = (c * du + s * dv, -s * du + c * dv);
            if !inside(part.shape, u, v, part.radii) {
                continue;
            }
            let base = if texture_is_accent(part.texture, u, v) { part.accent } else { part.color };
            image.set(x, y, jitter(base, color_delta));
            cover(x, y);
        }
    }
}

/// A rendered image and its target mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
}

/// A render broken down into its layers, for auditing the mask contract.
#[derive(Debug, Clone)]
pub struct RenderLayers {
    pub sample: Sample,
    pub target_coverage: Mask,
    pub distractor_coverage: Mask,
}

/// Renders categories at a fixed image size. Each render is rejected and
/// redrawn until its mask covers `[MIN_AREA_FRACTION, MAX_AREA_FRACTION]` of
/// the image and keeps both classes present after nearest downsampling to
/// the feature grid.
#[derive(Debug, Clone)]
pub struct ShapeGenerator {
    image_size: usize,
    feature_size: usize,
    categories: Vec<CategorySpec>,
}

impl ShapeGenerator {
    pub fn new(image_size: usize, feature_size: usize) -> Result<Self> {
        if image_size < 16 || feature_size == 0 || feature_size > image_size {
            return Err(Error::InvalidArgument(format!(
                "image size {image_size} / feature size {feature_size} unsupported"
            )));
        }
        Ok(Self {
            image_size,
            feature_size,
            categories: all_categories(),
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn feature_size(&self) -> usize {
        self.feature_size
    }

    pub fn categories(&self) -> &[CategorySpec] {
        &self.categories
    }

    /// Pixel-deterministic render of `category_id` under `seed`.
    pub fn generate(&self, category_id: usize, seed: u64) -> Result<Sample> {
        Ok(self.render_layers(category_id, seed)?.sample)
    }

    pub fn render_layers(&self, category_id: usize, seed: u64) -> Result<RenderLayers> {
        if category_id >= NUM_CATEGORIES {
            return Err(Error::InvalidArgument(format!("category id {category_id} out of range")));
        }
        let base = seed::derive(seed, category_id as u64);
        for attempt in 0..MAX_ATTEMPTS {
            let layers = self.render_attempt(category_id, seed::derive(base, attempt));
            let area = layers.sample.mask.area_fraction();
            let coarse = layers.sample.mask.resize_nearest(self.feature_size, self.feature_size);
            let fg = coarse.foreground_count();
            if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&area) && fg > 0 && fg < coarse.values().len() {
                return Ok(layers);
            }
        }
        Err(Error::InvalidArgument(format!(
            "could not render category {category_id} within area bounds"
        )))
    }

    fn render_attempt(&self, category_id: usize, seed: u64) -> RenderLayers {
        let size = self.image_size;
        let unit = size as f64 / 64.0;
        let mut rng = seed::rng(seed);
        let mut image = background(size, &mut rng);

        let mut distractor_coverage = Mask::zeros(size, size);
        let n_distractors = rng.gen_range(1..=3);
        for _ in 0..n_distractors {
            let mut other = rng.gen_range(0..NUM_CATEGORIES - 1);
            if other >= category_id {
                other += 1;
            }
            let parts = &self.categories[other].parts;
            let part = &parts[rng.gen_range(0..parts.len())];
            let pose = Pose {
                center: [rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)],
                scale: rng.gen_range(0.6..1.2) * unit,
                angle: rng.gen_range(0.0..2.0 * PI),
            };
            let part = PartSpec {
                offset: [0.0, 0.0],
                ..part.clone()
            };
            let delta = color_jitter(&mut rng);
            paint_part(&mut image, &part, &pose, delta, |x, y| distractor_coverage.set(x, y, true));
        }

        let margin = 0.25 * size as f64;
        let pose = Pose {
            center: [
                rng.gen_range(margin..size as f64 - margin),
                rng.gen_range(margin..size as f64 - margin),
            ],
            scale: rng.gen_range(0.5..1.5) * unit,
            angle: rng.gen_range(-PI / 4.0..PI / 4.0),
        };
        let mut target_coverage = Mask::zeros(size, size);
        for part in &self.categories[category_id].parts {
            let delta = color_jitter(&mut rng);
            paint_part(&mut image, part, &pose, delta, |x, y| target_coverage.set(x, y, true));
        }
        add_noise(&mut image, &mut rng);

        RenderLayers {
            sample: Sample {
                image,
                mask: target_coverage.clone(),
            },
            target_coverage,
            distractor_coverage,
        }
    }
}

fn color_jitter(rng: &mut impl Rng) -> [i32; 3] {
    std::array::from_fn(|_| rng.gen_range(-20..=20))
}

fn background(size: usize, rng: &mut impl Rng) -> RgbImage {
    let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(40.0..215.0));
    let b: [f64; 3] = std::array::from_fn(|_| rng.gen_range(40.0..215.0));
    let dir = rng.gen_range(0.0..2.0 * PI);
    let (dy, dx) = dir.sin_cos();
    let mut image = RgbImage::filled(size, size, [0, 0, 0]);
    let half = size as f64 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 - half) * dx + (y as f64 - half) * dy) / size as f64 + 0.5).clamp(0.0, 1.0);
            image.set(x, y, std::array::from_fn(|c| (a[c] * (1.0 - t) + b[c] * t).round() as u8));
        }
    }
    image
}

fn add_noise(image: &mut RgbImage, rng: &mut impl Rng) {
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.get(x, y);
            let noisy = std::array::from_fn(|c| (px[c] as i32 + rng.gen_range(-8..=8)).clamp(0, 255) as u8);
            image.set(x, y, noisy);
        }
    }
}
