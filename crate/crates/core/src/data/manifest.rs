//! Dataset manifest: everything needed to regenerate every pixel.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::episode::SplitSpec;
use super::pnm::{self, Encoding};
use super::synth::{CategorySpec, ShapeGenerator, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub train_categories: BTreeSet<usize>,
    pub test_categories: BTreeSet<usize>,
    pub train_seed: u64,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviewEntry {
    pub category_id: usize,
    pub seed: u64,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub feature_size: usize,
    pub folds: Vec<FoldEntry>,
    pub categories: Vec<CategorySpec>,
    pub previews: Vec<PreviewEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub folds: usize,
    pub previews_per_category: usize,
    pub image_size: usize,
    pub feature_size: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 4,
            previews_per_category: 2,
            image_size: 64,
            feature_size: 16,
        }
    }
}

/// Writes `manifest.json` plus PPM/PGM previews into `out`.
pub fn generate_dataset(out: &Path, opts: &GenerateOptions) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let generator = ShapeGenerator::new(opts.image_size, opts.feature_size)?;
    let folds = (0..opts.folds)
        .map(|fold| {
            let split = SplitSpec::for_fold(fold)?;
            Ok(FoldEntry {
                fold,
                train_categories: split.train_categories,
                test_categories: split.test_categories,
                train_seed: seed::derive(opts.seed, 2 * fold as u64),
                test_seed: seed::derive(opts.seed, 2 * fold as u64 + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut previews = Vec::new();
    for category_id in 0..NUM_CATEGORIES {
        for i in 0..opts.previews_per_category {
            let sample_seed = seed::derive(seed::derive(opts.seed, 0xF00D + category_id as u64), i as u64);
            let sample = generator.generate(category_id, sample_seed)?;
            let image_bytes = pnm::encode_ppm(&sample.image, Encoding::Raw);
            let mask_bytes = pnm::encode_pgm(&sample.mask.to_gray(), Encoding::Raw);
            let image = format!("cat{category_id:02}_{i:03}.ppm");
            let mask = format!("cat{category_id:02}_{i:03}_mask.pgm");
            fs::write(out.join(&image), &image_bytes).map_err(|e| Error::io(out.join(&image), e))?;
            fs::write(out.join(&mask), &mask_bytes).map_err(|e| Error::io(out.join(&mask), e))?;
            previews.push(PreviewEntry {
                category_id,
                seed: sample_seed,
                image,
                mask,
                image_sha256: sha256_hex(&image_bytes),
                mask_sha256: sha256_hex(&mask_bytes),
            });
        }
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        image_size: opts.image_size,
        feature_size: opts.feature_size,
        folds,
        categories: generator.categories().to_vec(),
        previews,
    };
    let path = out.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Re-renders every preview from its recorded seed and returns the file
/// names whose hashes (of the regenerated bytes or the files on disk) differ
/// from the manifest.
pub fn audit_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<String>> {
    let generator = ShapeGenerator::new(manifest.image_size, manifest.feature_size)?;
    let mut mismatches = Vec::new();
    for p in &manifest.previews {
        let sample = generator.generate(p.category_id, p.seed)?;
        let regenerated = [
            (&p.image, pnm::encode_ppm(&sample.image, Encoding::Raw), &p.image_sha256),
            (&p.mask, pnm::encode_pgm(&sample.mask.to_gray(), Encoding::Raw), &p.mask_sha256),
        ];
        for (name, bytes, expected) in regenerated {
            let on_disk = fs::read(dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
            if &sha256_hex(&bytes) != expected || &sha256_hex(&on_disk) != expected {
                mismatches.push(name.clone());
            }
        }
    }
    Ok(mismatches)
}
