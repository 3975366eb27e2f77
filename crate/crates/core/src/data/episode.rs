use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::{Sample, ShapeGenerator, NUM_CATEGORIES};
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 4;

/// Disjoint train/test category sets for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fold: usize,
    pub train_categories: BTreeSet<usize>,
    pub test_categories: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl SplitSpec {
    pub fn new(fold: usize, train: BTreeSet<usize>, test: BTreeSet<usize>) -> Result<Self> {
        if let Some(shared) = train.intersection(&test).next() {
            return Err(Error::InvalidArgument(format!(
                "category {shared} is in both train and test splits"
            )));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument("both splits need at least one category".into()));
        }
        if let Some(bad) = train.iter().chain(&test).find(|&&c| c >= NUM_CATEGORIES) {
            return Err(Error::InvalidArgument(format!("category {bad} out of range")));
        }
        Ok(Self {
            fold,
            train_categories: train,
            test_categories: test,
        })
    }

    /// Fold `i` tests on categories `4i..4i+4` and trains on the other 12.
    pub fn for_fold(fold: usize) -> Result<Self> {
        if fold >= NUM_FOLDS {
            return Err(Error::InvalidArgument(format!("fold {fold} outside [0, {NUM_FOLDS})")));
        }
        let per_fold = NUM_CATEGORIES / NUM_FOLDS;
        let test: BTreeSet<usize> = (fold * per_fold..(fold + 1) * per_fold).collect();
        let train = (0..NUM_CATEGORIES).filter(|c| !test.contains(c)).collect();
        Self::new(fold, train, test)
    }

    pub fn categories(&self, phase: Phase) -> &BTreeSet<usize> {
        match phase {
            Phase::Train => &self.train_categories,
            Phase::Test => &self.test_categories,
        }
    }
}

/// Support set and query drawn from one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub supports: Vec<Sample>,
    pub query: Sample,
    pub category_id: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }
}

/// Picks a category uniformly from the phase's split, then renders
/// `shots + 1` independent samples of it.
pub fn sample_episode(
    generator: &ShapeGenerator,
    split: &SplitSpec,
    phase: Phase,
    shots: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::InvalidArgument("an episode needs at least one support".into()));
    }
    let pool: Vec<usize> = split.categories(phase).iter().copied().collect();
    let category_id = pool[rng.gen_range(0..pool.len())];
    let other = match phase {
        Phase::Train => &split.test_categories,
        Phase::Test => &split.train_categories,
    };
    assert!(
        !other.contains(&category_id),
        "category {category_id} drawn for {phase:?} also belongs to the opposite split"
    );
    let mut render = || generator.generate(category_id, rng.gen());
    let supports = (0..shots).map(|_| render()).collect::<Result<Vec<_>>>()?;
    let query = render()?;
    Ok(Episode {
        supports,
        query,
        category_id,
    })
}
