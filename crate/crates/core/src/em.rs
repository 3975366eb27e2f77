//! Prototype mixture models estimated by expectation-maximization.
//!
//! Each mixture component has density `β_c(κ)·exp(κ·kernel(s, μ_k))` with a
//! concentration κ shared by all components and mixing weights ignored. The
//! normalizer `β_c(κ)` (a Bessel-function expression for the von
//! Mises-Fisher case) is therefore identical across components and cancels
//! exactly from the responsibilities, so it is never evaluated.
//!
//! Means are updated as plain responsibility-weighted averages. They are not
//! projected back to the unit sphere unless [`EmConfig::renormalize`] is set.

use std::cmp::Ordering;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::seed;
use crate::tensor::Tensor;

/// Floor applied to vector norms before dividing by them.
pub const NORM_FLOOR: f64 = 1e-12;

/// A component whose total responsibility falls below this fraction of the
/// sample count is re-seeded.
pub const DEAD_COMPONENT_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Score `κ·μᵀs` (von Mises-Fisher).
    #[default]
    Vmf,
    /// Score `−κ·‖s − μ‖²` (fixed-covariance Gaussian).
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Foreground,
    Background,
}

/// Non-empty set of equal-length feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
    origin: Origin,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, dim: usize, origin: Origin) -> Result<Self> {
        if data.is_empty() || dim == 0 {
            return Err(match origin {
                Origin::Foreground => Error::EmptyForeground,
                Origin::Background => Error::EmptyBackground,
            });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::shape("sample_set", format!("{} values for dim {dim}", data.len())));
        }
        Ok(Self { data, dim, origin })
    }

    pub fn from_rows(rows: &[Vec<f64>], origin: Origin) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("sample_set", "rows differ in dimension"));
        }
        Self::new(rows.concat(), dim, origin)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    fn l2_normalized(&self) -> SampleSet {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.dim) {
            normalize_in_place(row);
        }
        out
    }

    fn concat(sets: &[SampleSet], origin: Origin) -> Result<SampleSet> {
        let dim = sets.first().map_or(0, |s| s.dim);
        if sets.iter().any(|s| s.dim != dim) {
            return Err(Error::shape("sample_set", "shots differ in feature dimension"));
        }
        let data = sets.iter().flat_map(|s| s.data.iter().copied()).collect();
        SampleSet::new(data, dim, origin)
    }
}

/// `N×K` matrix of expectations; each row is a distribution over components.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::shape("responsibilities", format!("{n}×{k} vs {} values", values.len())));
        }
        Ok(Self { n, k, values })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column_sum(&self, k: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, k)).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.k], self.values.clone()).expect("responsibility shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub kappa: f64,
    pub kernel: Kernel,
    pub iters: usize,
    pub seed: u64,
    /// Project means to unit length after every M-step.
    pub renormalize: bool,
    /// L2-normalize samples before fitting.
    pub normalize_samples: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            kappa: 20.0,
            kernel: Kernel::Vmf,
            iters: 10,
            seed: 0,
            renormalize: false,
            normalize_samples: false,
        }
    }
}

/// Foreground and background prototype mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub mu_pos: Vec<Vec<f64>>,
    pub mu_neg: Vec<Vec<f64>>,
    pub k: usize,
    pub kappa: f64,
    pub kernel: Kernel,
}

/// A component that was re-seeded because it lost all responsibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reseed {
    pub iteration: usize,
    pub component: usize,
    pub sample: usize,
}

/// Full record of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub means: Vec<Vec<f64>>,
    /// Responsibilities consumed by the final M-step.
    pub responsibilities: Responsibilities,
    /// Sample indices the means were initialized from.
    pub init: Vec<usize>,
    pub reseeds: Vec<Reseed>,
}

/// Indices of foreground and background pixels of a mask, row-major.
pub fn partition_indices(mask: &Mask) -> (Vec<usize>, Vec<usize>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, &v) in mask.values().iter().enumerate() {
        if v == 1 {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    (fg, bg)
}

fn gather(features: &Tensor, indices: &[usize], origin: Origin) -> Result<SampleSet> {
    let c = features.channels();
    let data = indices
        .iter()
        .flat_map(|&i| features.data()[i * c..(i + 1) * c].iter().copied())
        .collect();
    SampleSet::new(data, c, origin)
}

fn check_mask_matches(features: &Tensor, mask: &Mask) -> Result<()> {
    let (h, w, _) = features.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(
            "partition_support",
            format!("features {h}×{w} vs mask {}×{}", mask.height(), mask.width()),
        ));
    }
    Ok(())
}

/// Splits an `H×W×C` feature map into foreground and background sample sets.
/// The mask must already be at feature resolution.
pub fn partition_support(features: &Tensor, mask: &Mask) -> Result<(SampleSet, SampleSet)> {
    check_mask_matches(features, mask)?;
    let (fg, bg) = partition_indices(mask);
    Ok((
        gather(features, &fg, Origin::Foreground)?,
        gather(features, &bg, Origin::Background)?,
    ))
}

/// Mean feature vector inside the mask.
pub fn masked_average_pool(features: &Tensor, mask: &Mask) -> Result<Vec<f64>> {
    check_mask_matches(features, mask)?;
    let (fg, _) = partition_indices(mask);
    if fg.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let c = features.channels();
    let mut mean = vec![0.0; c];
    for &i in &fg {
        for (m, v) in mean.iter_mut().zip(&features.data()[i * c..(i + 1) * c]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= fg.len() as f64);
    Ok(mean)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v).max(NORM_FLOOR);
    v.iter_mut().for_each(|x| *x /= n);
}

fn score(kernel: Kernel, kappa: f64, sample: &[f64], mean: &[f64]) -> f64 {
    match kernel {
        Kernel::Vmf => kappa * dot(mean, sample),
        Kernel::Gaussian => -kappa * sq_dist(sample, mean),
    }
}

/// Row-wise softmax of kernel scores with max-subtraction. Shared by the
/// E-step and the differentiable tape op.
pub(crate) fn responsibilities_flat(
    samples: &[f64],
    means: &[f64],
    n: usize,
    k: usize,
    dim: usize,
    kernel: Kernel,
    kappa: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let s = &samples[i * dim..(i + 1) * dim];
        let row = &mut out[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            *r = score(kernel, kappa, s, &means[j * dim..(j + 1) * dim]);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        row.iter_mut().for_each(|r| *r /= sum);
    }
    out
}

/// `μ_k = Σ_i w_ik s_i / Σ_i w_ik`, flat `K×C` output.
pub(crate) fn weighted_means_flat(samples: &[f64], weights: &[f64], n: usize, k: usize, dim: usize) -> Vec<f64> {
    let mut means = vec![0.0; k * dim];
    let mut totals = vec![0.0; k];
    for i in 0..n {
        let s = &samples[i * dim..(i + 1) * dim];
        for j in 0..k {
            let w = weights[i * k + j];
            totals[j] += w;
            for (m, v) in means[j * dim..(j + 1) * dim].iter_mut().zip(s) {
                *m += w * v;
            }
        }
    }
    for j in 0..k {
        means[j * dim..(j + 1) * dim].iter_mut().for_each(|m| *m /= totals[j]);
    }
    means
}

fn check_means(samples: &SampleSet, means: &[Vec<f64>]) -> Result<()> {
    if means.is_empty() {
        return Err(Error::InvalidArgument("need at least one prototype".into()));
    }
    if let Some(m) = means.iter().find(|m| m.len() != samples.dim()) {
        return Err(Error::shape(
            "e_step",
            format!("prototype dim {} vs sample dim {}", m.len(), samples.dim()),
        ));
    }
    Ok(())
}

/// Expectation step: `E_ik = softmax_k(score(s_i, μ_k))`.
pub fn e_step(samples: &SampleSet, means: &[Vec<f64>], kernel: Kernel, kappa: f64) -> Result<Responsibilities> {
    check_means(samples, means)?;
    let values = responsibilities_flat(
        samples.data(),
        &means.concat(),
        samples.len(),
        means.len(),
        samples.dim(),
        kernel,
        kappa,
    );
    Responsibilities::new(samples.len(), means.len(), values)
}

/// Maximization step: responsibility-weighted sample means.
pub fn m_step(samples: &SampleSet, resp: &Responsibilities) -> Result<Vec<Vec<f64>>> {
    if resp.samples() != samples.len() {
        return Err(Error::shape(
            "m_step",
            format!("{} samples vs {} responsibility rows", samples.len(), resp.samples()),
        ));
    }
    let flat = weighted_means_flat(samples.data(), resp.values(), samples.len(), resp.components(), samples.dim());
    Ok(flat.chunks_exact(samples.dim()).map(<[f64]>::to_vec).collect())
}

/// `max_k ‖μ_k − M(E(μ))_k‖`: distance of the means from an EM fixed point.
pub fn self_consistency_residual(samples: &SampleSet, means: &[Vec<f64>], kernel: Kernel, kappa: f64) -> Result<f64> {
    let next = m_step(samples, &e_step(samples, means, kernel, kappa)?)?;
    Ok(means
        .iter()
        .zip(&next)
        .map(|(a, b)| sq_dist(a, b).sqrt())
        .fold(0.0, f64::max))
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Index maximizing `key`, ties broken by the lexicographically larger sample
/// so the choice does not depend on sample order.
fn argmax_by_key(samples: &SampleSet, candidates: impl Iterator<Item = usize>, key: impl Fn(usize) -> f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let v = key(i);
        best = match best {
            None => Some((i, v)),
            Some((bi, bv)) => match v.total_cmp(&bv).then_with(|| lexicographic(samples.row(i), samples.row(bi))) {
                Ordering::Greater => Some((i, v)),
                _ => Some((bi, bv)),
            },
        };
    }
    best.expect("non-empty candidate set").0
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_FLOOR) * norm(b).max(NORM_FLOOR))
}

fn seeding_distance(kernel: Kernel, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Vmf => 1.0 - cosine(a, b),
        Kernel::Gaussian => sq_dist(a, b),
    }
}

/// Farthest-point seeding. The first mean is the sample best aligned with a
/// seeded random direction; each further mean is the sample farthest (under
/// the kernel's distance) from all means chosen so far.
fn initial_indices(samples: &SampleSet, k: usize, kernel: Kernel, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let direction: Vec<f64> = (0..samples.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let first = argmax_by_key(samples, 0..samples.len(), |i| {
        let s = samples.row(i);
        match kernel {
            Kernel::Vmf => cosine(s, &direction),
            Kernel::Gaussian => dot(s, &direction),
        }
    });
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..samples.len())
        .map(|i| seeding_distance(kernel, samples.row(i), samples.row(first)))
        .collect();
    while chosen.len() < k {
        let next = argmax_by_key(samples, 0..samples.len(), |i| nearest[i]);
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(seeding_distance(kernel, samples.row(i), samples.row(next)));
        }
    }
    chosen
}

/// Runs `cfg.iters` rounds of E- and M-steps on one sample set.
pub fn fit_mixture(samples: &SampleSet, cfg: &EmConfig) -> Result<MixtureFit> {
    if cfg.k == 0 || cfg.iters == 0 {
        return Err(Error::InvalidArgument("EM needs k ≥ 1 and iters ≥ 1".into()));
    }
    let normalized;
    let samples = if cfg.normalize_samples {
        normalized = samples.l2_normalized();
        &normalized
    } else {
        samples
    };
    let init = initial_indices(samples, cfg.k, cfg.kernel, cfg.seed);
    let mut means: Vec<Vec<f64>> = init.iter().map(|&i| samples.row(i).to_vec()).collect();
    let mut reseeds = Vec::new();
    let mut resp = None;
    for iteration in 0..cfg.iters {
        let mut e = e_step(samples, &means, cfg.kernel, cfg.kappa)?;
        revive_dead_components(samples, &mut e, &mut means, iteration, &mut reseeds);
        means = m_step(samples, &e)?;
        if cfg.renormalize {
            means.iter_mut().for_each(|m| normalize_in_place(m));
        }
        resp = Some(e);
    }
    Ok(MixtureFit {
        means,
        responsibilities: resp.expect("at least one iteration"),
        init,
        reseeds,
    })
}

/// Moves each component whose total responsibility is below
/// `DEAD_COMPONENT_FRACTION·N` onto the sample with the lowest maximum
/// responsibility, assigning that sample wholly to it. Taking a sample can
/// starve a component that was alive, so the scan repeats until no dead
/// component is left or no unused sample remains.
fn revive_dead_components(
    samples: &SampleSet,
    e: &mut Responsibilities,
    means: &mut [Vec<f64>],
    iteration: usize,
    reseeds: &mut Vec<Reseed>,
) {
    let threshold = DEAD_COMPONENT_FRACTION * samples.len() as f64;
    while let Some(component) = (0..e.k).find(|&j| e.column_sum(j) < threshold) {
        let taken: Vec<usize> = reseeds
            .iter()
            .filter(|r| r.iteration == iteration)
            .map(|r| r.sample)
            .collect();
        let candidates = (0..e.n).filter(|i| !taken.contains(i));
        let Some(sample) = candidates
            .map(|i| (i, e.row(i).iter().copied().fold(0.0, f64::max)))
            .reduce(|best, cur| {
                match (-cur.1).total_cmp(&-best.1).then_with(|| lexicographic(samples.row(cur.0), samples.row(best.0))) {
                    Ordering::Greater => cur,
                    _ => best,
                }
            })
            .map(|(i, _)| i)
        else {
            break;
        };
        means[component] = samples.row(sample).to_vec();
        let row = &mut e.values[sample * e.k..(sample + 1) * e.k];
        row.fill(0.0);
        row[component] = 1.0;
        reseeds.push(Reseed {
            iteration,
            component,
            sample,
        });
    }
}

fn stream_configs(cfg: &EmConfig) -> (EmConfig, EmConfig) {
    (
        EmConfig {
            seed: seed::derive(cfg.seed, 0),
            ..*cfg
        },
        EmConfig {
            seed: seed::derive(cfg.seed, 1),
            ..*cfg
        },
    )
}

/// Fits the foreground and background mixtures.
pub fn fit_pmm(s_pos: &SampleSet, s_neg: &SampleSet, cfg: &EmConfig) -> Result<PrototypeSet> {
    let (pos_cfg, neg_cfg) = stream_configs(cfg);
    let pos = fit_mixture(s_pos, &pos_cfg)?;
    let neg = fit_mixture(s_neg, &neg_cfg)?;
    Ok(PrototypeSet {
        mu_pos: pos.means,
        mu_neg: neg.means,
        k: cfg.k,
        kappa: cfg.kappa,
        kernel: cfg.kernel,
    })
}

/// Both mixture fits for a pair of sample sets, with the same per-origin
/// seed streams as [`fit_pmm`].
pub fn fit_pmm_detailed(s_pos: &SampleSet, s_neg: &SampleSet, cfg: &EmConfig) -> Result<(MixtureFit, MixtureFit)> {
    let (pos_cfg, neg_cfg) = stream_configs(cfg);
    Ok((fit_mixture(s_pos, &pos_cfg)?, fit_mixture(s_neg, &neg_cfg)?))
}

/// Pools foreground (and background) samples of every shot, then fits once.
/// Shots whose mask lacks one side simply contribute nothing to it.
pub fn fit_pmm_kshot(supports: &[(Tensor, Mask)], cfg: &EmConfig) -> Result<PrototypeSet> {
    let (pos, neg) = pool_supports(supports)?;
    fit_pmm(&pos, &neg, cfg)
}

pub fn pool_supports(supports: &[(Tensor, Mask)]) -> Result<(SampleSet, SampleSet)> {
    if supports.is_empty() {
        return Err(Error::InvalidArgument("k-shot fitting needs at least one support".into()));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (features, mask) in supports {
        check_mask_matches(features, mask)?;
        let (fg, bg) = partition_indices(mask);
        if !fg.is_empty() {
            pos.push(gather(features, &fg, Origin::Foreground)?);
        }
        if !bg.is_empty() {
            neg.push(gather(features, &bg, Origin::Background)?);
        }
    }
    if pos.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if neg.is_empty() {
        return Err(Error::EmptyBackground);
    }
    Ok((
        SampleSet::concat(&pos, Origin::Foreground)?,
        SampleSet::concat(&neg, Origin::Background)?,
    ))
}
