//! Synthetic few-shot segmentation data: procedural categories, episodes,
//! augmentation and netpbm I/O.

pub mod augment;
pub mod episode;
pub mod manifest;
pub mod pnm;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use episode::{sample_episode, Episode, Phase, SplitSpec, NUM_FOLDS};
pub use synth::{Sample, ShapeGenerator, NUM_CATEGORIES};
