//! Episodic mIoU evaluation. True/false positives and false negatives are
//! summed per category over all episodes before the ratio is taken.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Phase, ShapeGenerator, SplitSpec};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::net::{EpisodeInput, PmmNet};
use crate::seed;

/// How per-category IoU is formed; echoed into every report.
pub const ACCUMULATION: &str = "category_totals";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shots: usize,
    pub fold: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            shots: 1,
            fold: 0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.shots == 0 {
            return Err(Error::InvalidArgument("episodes and shots must be positive".into()));
        }
        SplitSpec::for_fold(self.fold).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::shape("confusion", "prediction and ground truth sizes differ"));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `TP/(TP+FP+FN)`; 1 when both prediction and ground truth are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Order-independent per-category accumulator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    totals: BTreeMap<usize, Confusion>,
    episodes: BTreeMap<usize, usize>,
    skipped: usize,
}

impl IouAccumulator {
    pub fn record(&mut self, category: usize, confusion: Confusion) {
        self.totals.entry(category).or_default().add(confusion);
        *self.episodes.entry(category).or_default() += 1;
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn per_category_iou(&self) -> BTreeMap<usize, f64> {
        self.totals.iter().map(|(&c, t)| (c, t.iou())).collect()
    }

    /// Unweighted mean over categories seen at least once.
    pub fn mean_iou(&self) -> f64 {
        let ious = self.per_category_iou();
        if ious.is_empty() {
            0.0
        } else {
            ious.values().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn report(&self, config: serde_json::Value) -> EvalReport {
        EvalReport {
            per_category_iou: self.per_category_iou(),
            mean_iou: self.mean_iou(),
            episodes: self.episodes.values().sum(),
            skipped: self.skipped,
            episodes_per_category: self.episodes.clone(),
            totals: self.totals.clone(),
            accumulation: ACCUMULATION.into(),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_iou: BTreeMap<usize, f64>,
    pub mean_iou: f64,
    /// Episodes that contributed to the totals.
    pub episodes: usize,
    /// Episodes excluded because a support had no foreground or background.
    pub skipped: usize,
    pub episodes_per_category: BTreeMap<usize, usize>,
    pub totals: BTreeMap<usize, Confusion>,
    pub accumulation: String,
    pub config: serde_json::Value,
}

/// Test-split episode `index` of an evaluation seeded with `seed`.
pub fn eval_episode_rng(seed: u64, index: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed::derive(seed, index as u64))
}

/// Runs `cfg.episodes` test episodes through a frozen model.
pub fn evaluate(net: &PmmNet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let split = SplitSpec::for_fold(cfg.fold)?;
    let generator = ShapeGenerator::new(net.config().image_size, net.config().feature_size())?;
    let mut acc = IouAccumulator::default();
    for i in 0..cfg.episodes {
        let mut rng = eval_episode_rng(cfg.seed, i);
        let ep = sample_episode(&generator, &split, Phase::Test, cfg.shots, &mut rng)?;
        let input = EpisodeInput::from_episode(&ep, net.config())?;
        match net.predict(&input) {
            Ok(pred) => acc.record(ep.category_id, Confusion::of(&pred.mask, &ep.query.mask)?),
            Err(e) if e.is_empty_partition() => {
                debug!("evaluation episode {i} skipped: {e}");
                acc.skip();
            }
            Err(e) => return Err(e),
        }
    }
    let config = serde_json::json!({ "eval": cfg, "model": net.config() });
    Ok(acc.report(config))
}
