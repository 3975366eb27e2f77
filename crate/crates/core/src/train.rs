//! Episodic training with heavy-ball SGD and a poly learning-rate decay.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_episode, AugmentConfig, Episode, Phase, ShapeGenerator, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::net::{Checkpoint, EmPolicy, EpisodeInput, ModelConfig, ParamStore, PmmNet};
use crate::seed;
use crate::tensor::{sgd_momentum_step, Tape};

/// Episodes drawn per batch slot before giving up on finding a usable one.
pub const MAX_RESAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_episodes: usize,
    pub poly_power: f64,
    pub shots: usize,
    pub fold: usize,
    pub seed: u64,
    pub augment: bool,
    pub augment_config: AugmentConfig,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0035,
            momentum: 0.9,
            iterations: 20_000,
            batch_episodes: 8,
            poly_power: 0.9,
            shots: 1,
            fold: 0,
            seed: 0,
            augment: true,
            augment_config: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.iterations == 0 || self.batch_episodes == 0 || self.shots == 0 {
            return bad("iterations, batch_episodes and shots must be positive");
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return bad("poly_power must be positive");
        }
        SplitSpec::for_fold(self.fold)?;
        Ok(())
    }
}

/// Everything one `train`/`eval` invocation needs, as read from a JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

/// `lr0 · (1 − step/iterations)^power`, with `step` clamped to the schedule.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let frac = step.min(cfg.iterations) as f64 / cfg.iterations as f64;
    cfg.lr0 * (1.0 - frac).powf(cfg.poly_power)
}

/// One line of the NDJSON metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    net: PmmNet,
    velocity: ParamStore,
    step: usize,
    cfg: TrainConfig,
    split: SplitSpec,
    generator: ShapeGenerator,
}

/// Mean loss and gradients over the usable episodes of a batch.
struct BatchGrad {
    loss: f64,
    grads: Vec<Vec<f64>>,
    used: usize,
    skipped: usize,
}

impl Trainer {
    pub fn new(net: PmmNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let size = net.config().image_size;
        let generator = ShapeGenerator::new(size, net.config().feature_size())?;
        Ok(Self {
            velocity: net.params().zeros_like(),
            step: 0,
            split: SplitSpec::for_fold(cfg.fold)?,
            generator,
            net,
            cfg,
        })
    }

    /// Continues from a checkpoint; the schedule resumes at its step.
    pub fn resume(checkpoint: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let velocity = checkpoint
            .velocity
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let net = PmmNet::from_params(checkpoint.model, checkpoint.params)?;
        net.params().check_compatible(&velocity)?;
        let mut t = Self::new(net, cfg)?;
        t.velocity = velocity;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn net(&self) -> &PmmNet {
        &self.net
    }

    pub fn into_net(self) -> PmmNet {
        self.net
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self, run: serde_json::Value) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.net.config().clone(),
            run,
            params: self.net.params().clone(),
            velocity: Some(self.velocity.clone()),
        }
    }

    /// Training episodes of step `step`; a pure function of seed and step
    /// so that resumed runs see the same data.
    pub fn batch_for_step(&self, step: usize) -> Result<Vec<Episode>> {
        let mut rng = seed::rng(seed::derive(self.cfg.seed, step as u64));
        let fs = self.net.config().feature_size();
        let aug = AugmentConfig {
            feature_size: fs,
            ..self.cfg.augment_config
        };
        let mut batch = Vec::with_capacity(self.cfg.batch_episodes);
        for _ in 0..self.cfg.batch_episodes {
            let mut ep = None;
            for _ in 0..MAX_RESAMPLES {
                let mut cand = sample_episode(&self.generator, &self.split, Phase::Train, self.cfg.shots, &mut rng)?;
                if self.cfg.augment {
                    for s in cand.supports.iter_mut().chain(std::iter::once(&mut cand.query)) {
                        let (image, mask) = augment(&s.image, &s.mask, &aug, &mut rng);
                        s.image = image;
                        s.mask = mask;
                    }
                }
                let coarse: Vec<usize> =
                    cand.supports.iter().map(|s| s.mask.resize_nearest(fs, fs).foreground_count()).collect();
                let usable = coarse.iter().any(|&n| n > 0) && coarse.iter().any(|&n| n < fs * fs);
                ep = Some(cand);
                if usable {
                    break;
                }
                debug!("step {step}: resampling an episode without both classes");
            }
            batch.push(ep.expect("at least one draw"));
        }
        Ok(batch)
    }

    fn batch_gradient(&self, episodes: &[Episode]) -> Result<BatchGrad> {
        let mut grads: Vec<Vec<f64>> = self.net.params().entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        let mut loss = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for ep in episodes {
            let input = EpisodeInput::from_episode(ep, self.net.config())?;
            let mut tape = Tape::new();
            let vars = self.net.params().register(&mut tape);
            let fwd = match self.net.forward(&mut tape, &vars, &input, EmPolicy::Fit) {
                Ok(f) => f,
                Err(e) if e.is_empty_partition() => {
                    debug!("step {}: skipping episode of category {}: {e}", self.step, ep.category_id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(self.diagnose(e)),
            };
            let terms = self.net.loss(&mut tape, &fwd, &ep.query.mask).map_err(|e| self.diagnose(e))?;
            let value = tape.value(terms.total).item();
            if !value.is_finite() {
                return Err(self.diagnose(Error::NonFinite { op: "loss" }));
            }
            let g = tape.backward(terms.total).map_err(|e| self.diagnose(e))?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                if let Some(gv) = g.get_slice(v) {
                    acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                }
            }
            loss += value;
            used += 1;
        }
        if used > 0 {
            let inv = 1.0 / used as f64;
            loss *= inv;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
        }
        Ok(BatchGrad {
            loss,
            grads,
            used,
            skipped,
        })
    }

    fn diagnose(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::NonFiniteLoss {
                step: self.step as u64,
                lr: poly_lr(self.step, &self.cfg),
                detail: format!("non-finite value produced by {op}"),
            },
            other => other,
        }
    }

    /// One SGD update on the mean loss of `episodes`. Episodes whose support
    /// lacks a foreground or background region are skipped.
    pub fn train_step(&mut self, episodes: &[Episode]) -> Result<StepRecord> {
        let lr = poly_lr(self.step, &self.cfg);
        let batch = self.batch_gradient(episodes)?;
        if batch.used > 0 {
            for (i, g) in batch.grads.iter().enumerate() {
                let w = self.net.params_mut().tensor_mut(i);
                sgd_momentum_step(w, self.velocity.tensor_mut(i), g, lr, self.cfg.momentum)
                    .map_err(|e| self.diagnose(e))?;
            }
        }
        let record = StepRecord {
            step: self.step,
            loss: batch.loss,
            lr,
            skipped: batch.skipped,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `cfg.iterations`, writing one NDJSON record per step and
    /// calling `on_checkpoint` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        log: &mut impl Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.cfg.iterations {
            let batch = self.batch_for_step(self.step)?;
            let record = self.train_step(&batch)?;
            serde_json::to_writer(&mut *log, &record)?;
            writeln!(log).map_err(|e| Error::io("<metrics log>", e))?;
            if record.step % 50 == 0 {
                info!("step {} loss {:.4} lr {:.5}", record.step, record.loss, record.lr);
            }
            records.push(record);
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                on_checkpoint(self)?;
            }
        }
        Ok(records)
    }
}
