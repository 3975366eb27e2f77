//! Two-branch few-shot segmentation network: shared encoder, prototype
//! mixtures fitted on support features, query activation by P-Match and
//! P-Conv, an ASPP-lite context block, a prediction head and a residual
//! stack of such branches.

pub mod checkpoint;
pub mod config;
pub mod params;

use log::debug;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, ResidualMode, SoftmaxScope};
pub use params::{init_params, ConvLayer, Layout, NamedTensor, ParamStore};

use crate::data::Episode;
use crate::em::{fit_pmm_detailed, partition_indices, MixtureFit, Origin, SampleSet};
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::tensor::{Tape, Tensor, Var};
use params::BranchLayers;

/// Normalized image tensors and full-resolution masks of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeInput {
    pub supports: Vec<(Tensor, Mask)>,
    pub query: Tensor,
}

impl EpisodeInput {
    pub fn new(supports: &[(RgbImage, Mask)], query: &RgbImage, cfg: &ModelConfig) -> Result<Self> {
        if supports.is_empty() {
            return Err(Error::InvalidArgument("an episode needs at least one support".into()));
        }
        let size = cfg.image_size;
        let check = |img: &RgbImage| {
            if (img.width(), img.height()) == (size, size) {
                Ok(())
            } else {
                Err(Error::shape(
                    "episode_input",
                    format!("image {}×{} vs model size {size}", img.width(), img.height()),
                ))
            }
        };
        check(query)?;
        let supports = supports
            .iter()
            .map(|(img, mask)| {
                check(img)?;
                if (mask.width(), mask.height()) != (size, size) {
                    return Err(Error::shape("episode_input", "support mask size differs from image"));
                }
                Ok((img.to_tensor(&cfg.normalization), mask.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            supports,
            query: query.to_tensor(&cfg.normalization),
        })
    }

    pub fn from_episode(episode: &Episode, cfg: &ModelConfig) -> Result<Self> {
        let supports: Vec<(RgbImage, Mask)> =
            episode.supports.iter().map(|s| (s.image.clone(), s.mask.clone())).collect();
        Self::new(&supports, &episode.query.image, cfg)
    }
}

/// Foreground and background mixture fits of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFit {
    pub pos: MixtureFit,
    pub neg: MixtureFit,
}

/// Where a forward pass gets its EM results.
#[derive(Debug, Clone, Copy)]
pub enum EmPolicy<'a> {
    /// Run EM on the current support features.
    Fit,
    /// Reuse earlier fits (initial indices and responsibilities). Used to
    /// hold EM fixed while parameters are perturbed.
    Replay(&'a [BranchFit]),
}

/// P-Conv outputs; all `H×W×·` at feature resolution.
#[derive(Debug, Clone, Copy)]
pub struct ProbabilityMaps {
    /// `2K` channels: foreground prototypes first, then background.
    pub per_prototype: Var,
    /// Channel 0 is the fused foreground map, channel 1 the background map.
    pub fused: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    pub mu_pos: Var,
    pub mu_neg: Var,
    pub matched: Var,
    pub maps: ProbabilityMaps,
    /// `[M⁺, M⁻, Q′]`, `C+2` channels.
    pub activated: Var,
    /// Branch logits at image resolution.
    pub residual: Var,
    /// Running sum of residuals up to this branch.
    pub cumulative: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub query_features: Var,
    pub branches: Vec<BranchTrace>,
    pub fits: Vec<BranchFit>,
}

impl Forward {
    pub fn logits(&self) -> Var {
        self.branches.last().expect("at least one branch").cumulative
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    /// Cross-entropy of each cumulative prediction.
    pub per_branch: Vec<f64>,
}

/// Prediction of one episode, detached from any tape.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub mask: Mask,
    pub per_prototype: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub fits: Vec<BranchFit>,
}

/// Mask of pixels whose foreground logit beats the background logit.
pub fn argmax_mask(logits: &Tensor) -> Result<Mask> {
    let (h, w, c) = logits.dims3()?;
    if c != 2 {
        return Err(Error::shape("argmax_mask", format!("expected 2 channels, got {c}")));
    }
    let d = logits.data();
    Ok(Mask::from_fn(w, h, |x, y| {
        let i = (y * w + x) * 2;
        d[i + 1] > d[i]
    }))
}

/// Row `k` of a `K×C` matrix repeated over an `h×w` grid.
pub fn tile_prototype(tape: &mut Tape, protos: Var, k: usize, h: usize, w: usize) -> Result<Var> {
    let c = tape.value(protos).channels();
    let row = tape.gather_rows(protos, &[k])?;
    let pixel = tape.reshape(row, &[1, 1, c])?;
    tape.bilinear_resize(pixel, h, w)
}

fn check_proto_dim(tape: &Tape, protos: Var, query: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (h, w, c) = tape
        .value(query)
        .dims3()
        .map_err(|_| Error::shape(op, format!("query must be H×W×C, got {:?}", tape.shape(query))))?;
    match tape.shape(protos) {
        &[k, pc] if pc == c => Ok((h, w, c, k)),
        other => Err(Error::shape(op, format!("prototypes {other:?} vs query channels {c}"))),
    }
}

/// Tiles every foreground prototype over the query grid, concatenates them
/// after the query and reduces back to `C` channels with `layer` + relu.
pub fn p_match(tape: &mut Tape, vars: &[Var], layer: &ConvLayer, query: Var, mu_pos: Var) -> Result<Var> {
    let (h, w, _, k) = check_proto_dim(tape, mu_pos, query, "p_match")?;
    let mut parts = vec![query];
    for j in 0..k {
        parts.push(tile_prototype(tape, mu_pos, j, h, w)?);
    }
    let stacked = tape.concat_channels(&parts)?;
    layer.apply(tape, vars, stacked, true)
}

/// Uses each prototype as a 1×1 classifier on the query and turns the `2K`
/// score maps into probabilities.
pub fn p_conv(tape: &mut Tape, query: Var, mu_pos: Var, mu_neg: Var, scope: SoftmaxScope) -> Result<ProbabilityMaps> {
    let (h, w, _, k) = check_proto_dim(tape, mu_pos, query, "p_conv")?;
    let (_, _, _, kn) = check_proto_dim(tape, mu_neg, query, "p_conv")?;
    if kn != k {
        return Err(Error::shape("p_conv", format!("{k} foreground vs {kn} background prototypes")));
    }
    let mut scores = Vec::with_capacity(2 * k);
    for protos in [mu_pos, mu_neg] {
        for j in 0..k {
            let tiled = tile_prototype(tape, protos, j, h, w)?;
            let product = tape.elementwise_mul(tiled, query)?;
            scores.push(tape.sum_channels(product)?);
        }
    }
    let per_prototype = match scope {
        SoftmaxScope::Joint => {
            let all = tape.concat_channels(&scores)?;
            tape.softmax_channels(all)?
        }
        SoftmaxScope::PerPair => {
            let mut pos = Vec::with_capacity(k);
            let mut neg = Vec::with_capacity(k);
            for j in 0..k {
                let pair = tape.concat_channels(&[scores[j], scores[k + j]])?;
                let probs = tape.softmax_channels(pair)?;
                pos.push(tape.slice_channels(probs, 0, 1)?);
                neg.push(tape.slice_channels(probs, 1, 2)?);
            }
            pos.extend(neg);
            tape.concat_channels(&pos)?
        }
    };
    let pos = tape.slice_channels(per_prototype, 0, k)?;
    let neg = tape.slice_channels(per_prototype, k, 2 * k)?;
    let mut fused_pos = tape.sum_channels(pos)?;
    let mut fused_neg = tape.sum_channels(neg)?;
    if scope == SoftmaxScope::PerPair {
        fused_pos = tape.scale(fused_pos, 1.0 / k as f64)?;
        fused_neg = tape.scale(fused_neg, 1.0 / k as f64)?;
    }
    let fused = tape.concat_channels(&[fused_pos, fused_neg])?;
    Ok(ProbabilityMaps { per_prototype, fused })
}

/// `[M⁺, M⁻, Q′]` along channels.
pub fn activate_query(tape: &mut Tape, fused: Var, matched: Var) -> Result<Var> {
    tape.concat_channels(&[fused, matched])
}

/// Dilated 3×3 branches (rates 1, 2, 4) and a global-mean branch,
/// concatenated and reduced by a 1×1 convolution. Spatial size is kept.
pub fn aspp_lite(tape: &mut Tape, vars: &[Var], layers: &BranchLayers, x: Var) -> Result<Var> {
    let (h, w, _) = tape
        .value(x)
        .dims3()
        .map_err(|_| Error::shape("aspp_lite", "input must be H×W×C"))?;
    let mut parts = Vec::with_capacity(4);
    for layer in &layers.aspp_dilated {
        parts.push(layer.apply(tape, vars, x, true)?);
    }
    let pooled = tape.global_mean(x)?;
    let pooled = layers.aspp_pool.apply(tape, vars, pooled, true)?;
    parts.push(tape.bilinear_resize(pooled, h, w)?);
    let stacked = tape.concat_channels(&parts)?;
    layers.aspp_project.apply(tape, vars, stacked, true)
}

/// Context block, two 3×3 convolutions, 1×1 logits and bilinear upsampling.
pub fn predict_head(tape: &mut Tape, vars: &[Var], layers: &BranchLayers, activated: Var, size: usize) -> Result<Var> {
    let x = aspp_lite(tape, vars, layers, activated)?;
    let x = layers.head[0].apply(tape, vars, x, true)?;
    let x = layers.head[1].apply(tape, vars, x, true)?;
    let logits = layers.output.apply(tape, vars, x, false)?;
    tape.bilinear_resize(logits, size, size)
}

/// Encoder, parameters and configuration of the whole network.
#[derive(Debug, Clone)]
pub struct PmmNet {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl PmmNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (layout, params) = init_params(&config)?;
        Ok(Self { config, layout, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let (layout, fresh) = init_params(&config)?;
        fresh.check_compatible(&params)?;
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encode(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Var> {
        let mut x = image;
        for layer in &self.layout.encoder {
            x = layer.apply(tape, vars, x, true)?;
        }
        Ok(x)
    }

    /// Foreground and background feature rows of all shots, each `N×C`.
    fn support_samples(&self, tape: &mut Tape, vars: &[Var], input: &EpisodeInput) -> Result<(Var, Var)> {
        let fs = self.config.feature_size();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (image, mask) in &input.supports {
            let image = tape.constant(image.clone());
            let features = self.encode(tape, vars, image)?;
            let (fg, bg) = partition_indices(&mask.resize_nearest(fs, fs));
            if !fg.is_empty() {
                pos.push(tape.gather_rows(features, &fg)?);
            }
            if !bg.is_empty() {
                neg.push(tape.gather_rows(features, &bg)?);
            }
        }
        if pos.is_empty() {
            return Err(Error::EmptyForeground);
        }
        if neg.is_empty() {
            return Err(Error::EmptyBackground);
        }
        let mut pos = tape.concat_rows(&pos)?;
        let mut neg = tape.concat_rows(&neg)?;
        if self.config.normalize_samples {
            pos = tape.l2_normalize_rows(pos)?;
            neg = tape.l2_normalize_rows(neg)?;
        }
        Ok((pos, neg))
    }

    /// Prototypes as a differentiable function of the samples, given a fit.
    fn prototypes(&self, tape: &mut Tape, samples: Var, fit: &MixtureFit) -> Result<Var> {
        let cfg = &self.config;
        let finish = |tape: &mut Tape, mu: Var| {
            if cfg.renormalize_prototypes {
                tape.l2_normalize_rows(mu)
            } else {
                Ok(mu)
            }
        };
        if cfg.unroll_em_grad && fit.reseeds.is_empty() {
            let mut mu = tape.gather_rows(samples, &fit.init)?;
            for _ in 0..cfg.em_iters {
                let e = tape.responsibilities(samples, mu, cfg.kappa, cfg.kernel)?;
                let m = tape.weighted_mean_rows(samples, e)?;
                mu = finish(tape, m)?;
            }
            return Ok(mu);
        }
        if cfg.unroll_em_grad {
            debug!("EM re-seeded a component; falling back to detached responsibilities");
        }
        let e = tape.constant(fit.responsibilities.to_tensor());
        let mu = tape.weighted_mean_rows(samples, e)?;
        finish(tape, mu)
    }

    /// Full forward pass of every branch on a fresh or shared tape. `vars`
    /// must come from registering [`Self::params`] on the same tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: &EpisodeInput, policy: EmPolicy) -> Result<Forward> {
        let cfg = &self.config;
        if let EmPolicy::Replay(fits) = policy {
            if fits.len() != cfg.branches {
                return Err(Error::InvalidArgument(format!(
                    "{} replayed fits for {} branches",
                    fits.len(),
                    cfg.branches
                )));
            }
        }
        let (pos, neg) = self.support_samples(tape, vars, input)?;
        let query_image = tape.constant(input.query.clone());
        let query = self.encode(tape, vars, query_image)?;
        let c = cfg.feature_dim();
        let pos_set = SampleSet::new(tape.value(pos).data().to_vec(), c, Origin::Foreground)?;
        let neg_set = SampleSet::new(tape.value(neg).data().to_vec(), c, Origin::Background)?;

        let mut branches = Vec::with_capacity(cfg.branches);
        let mut fits = Vec::with_capacity(cfg.branches);
        let mut cumulative: Option<Var> = None;
        for (t, layers) in self.layout.branches.iter().enumerate() {
            let fit = match policy {
                EmPolicy::Fit => {
                    let (p, n) = fit_pmm_detailed(&pos_set, &neg_set, &cfg.em_config(t))?;
                    BranchFit { pos: p, neg: n }
                }
                EmPolicy::Replay(f) => f[t].clone(),
            };
            let mu_pos = self.prototypes(tape, pos, &fit.pos)?;
            let mu_neg = self.prototypes(tape, neg, &fit.neg)?;
            let matched = p_match(tape, vars, &layers.p_match, query, mu_pos)?;
            let maps = p_conv(tape, query, mu_pos, mu_neg, cfg.softmax_scope)?;
            let fused = if cfg.use_p_conv {
                maps.fused
            } else {
                let shape = tape.shape(maps.fused).to_vec();
                tape.constant(Tensor::zeros(&shape))
            };
            let activated = activate_query(tape, fused, matched)?;
            let residual = predict_head(tape, vars, layers, activated, cfg.image_size)?;
            let total = match cumulative {
                None => residual,
                Some(prev) => tape.add(prev, residual)?,
            };
            cumulative = Some(total);
            branches.push(BranchTrace {
                mu_pos,
                mu_neg,
                matched,
                maps,
                activated,
                residual,
                cumulative: total,
            });
            fits.push(fit);
        }
        Ok(Forward {
            query_features: query,
            branches,
            fits,
        })
    }

    /// Training objective for one episode under the configured residual mode.
    pub fn loss(&self, tape: &mut Tape, forward: &Forward, target: &Mask) -> Result<LossTerms> {
        let mut per_branch = Vec::with_capacity(forward.branches.len());
        let mut terms = Vec::with_capacity(forward.branches.len());
        for (t, b) in forward.branches.iter().enumerate() {
            let ce = tape.cross_entropy_2d(b.cumulative, target)?;
            per_branch.push(tape.value(ce).item());
            match self.config.residual_mode {
                ResidualMode::PartialSums => terms.push(ce),
                ResidualMode::ResidualTarget if t == 0 => terms.push(ce),
                ResidualMode::ResidualTarget => {
                    let prev = tape.value(forward.branches[t - 1].cumulative);
                    let goal = residual_target(prev, target)?;
                    terms.push(tape.mean_squared_error(b.residual, &goal)?);
                }
            }
        }
        let mut total = terms[0];
        for &term in &terms[1..] {
            total = tape.add(total, term)?;
        }
        Ok(LossTerms { total, per_branch })
    }

    /// Inference without gradients.
    pub fn predict(&self, input: &EpisodeInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &vars, input, EmPolicy::Fit)?;
        let logits = tape.value(fwd.logits()).clone();
        Ok(Prediction {
            mask: argmax_mask(&logits)?,
            logits,
            per_prototype: fwd.branches.iter().map(|b| tape.value(b.maps.per_prototype).clone()).collect(),
            fused: fwd.branches.iter().map(|b| tape.value(b.maps.fused).clone()).collect(),
            fits: fwd.fits,
        })
    }
}

/// `onehot(gt) − softmax(prev)` per pixel, as an `H×W×2` tensor.
fn residual_target(prev: &Tensor, target: &Mask) -> Result<Tensor> {
    let (h, w, _) = prev.dims3()?;
    let mut data = Vec::with_capacity(h * w * 2);
    for (row, &t) in prev.data().chunks_exact(2).zip(target.values()) {
        let max = row[0].max(row[1]);
        let e0 = (row[0] - max).exp();
        let e1 = (row[1] - max).exp();
        let p1 = e1 / (e0 + e1);
        let gt = t as f64;
        data.push((1.0 - gt) - (1.0 - p1));
        data.push(gt - p1);
    }
    Tensor::new(vec![h, w, 2], data)
}
