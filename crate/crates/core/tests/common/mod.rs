//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use pmmseg_core::em::Kernel;
use pmmseg_core::image::Mask;
use pmmseg_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_rows(rng: &mut impl Rng, n: usize, c: usize, unit: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..c).map(|_| gaussian(rng)).collect();
            if unit {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect()
}

/// Posterior of component `k` written as `1 / Σ_j exp(score_j − score_k)`.
pub fn oracle_e_step(samples: &[Vec<f64>], means: &[Vec<f64>], kernel: Kernel, kappa: f64) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let scores: Vec<f64> = means
                .iter()
                .map(|m| match kernel {
                    Kernel::Vmf => {
                        let mut acc = 0.0;
                        for c in 0..s.len() {
                            acc += m[c] * s[c];
                        }
                        kappa * acc
                    }
                    Kernel::Gaussian => {
                        let mut acc = 0.0;
                        for c in 0..s.len() {
                            acc += (s[c] - m[c]) * (s[c] - m[c]);
                        }
                        -kappa * acc
                    }
                })
                .collect();
            scores
                .iter()
                .map(|sk| 1.0 / scores.iter().map(|sj| (sj - sk).exp()).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn oracle_m_step(samples: &[Vec<f64>], resp: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = resp[0].len();
    let c = samples[0].len();
    (0..k)
        .map(|j| {
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for (s, r) in samples.iter().zip(resp) {
                for d in 0..c {
                    num[d] += r[j] * s[d];
                }
                den += r[j];
            }
            num.iter().map(|v| v / den).collect()
        })
        .collect()
}

/// Mean feature of pixels with mask value `on`.
pub fn oracle_masked_mean(features: &Tensor, mask: &Mask, on: u8) -> Vec<f64> {
    let c = features.channels();
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for (i, &m) in mask.values().iter().enumerate() {
        if m == on {
            for (acc, v) in sum.iter_mut().zip(&features.data()[i * c..(i + 1) * c]) {
                *acc += v;
            }
            count += 1;
        }
    }
    sum.iter().map(|v| v / count as f64).collect()
}

pub fn max_abs_diff_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Every permutation of `0..n`, for small `n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Three well separated unit-norm clusters in `dim` dimensions, with their
/// empirical means.
pub fn three_clusters(rng: &mut impl Rng, dim: usize, per_cluster: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut samples = Vec::new();
    let mut means = Vec::new();
    for cluster in 0..3 {
        let mut center = vec![0.0; dim];
        center[cluster] = 1.0;
        let members: Vec<Vec<f64>> = (0..per_cluster)
            .map(|_| {
                let mut v: Vec<f64> = center.iter().map(|c| c + spread * gaussian(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        let mean = (0..dim)
            .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / per_cluster as f64)
            .collect();
        means.push(mean);
        samples.extend(members);
    }
    (samples, means)
}

/// Random `h×w` mask with at least one pixel of each class.
pub fn random_mask(rng: &mut impl Rng, w: usize, h: usize) -> Mask {
    loop {
        let p = rng.gen_range(0.1..0.9);
        let m = Mask::from_fn(w, h, |_, _| rng.gen_bool(p));
        let fg = m.foreground_count();
        if fg > 0 && fg < w * h {
            return m;
        }
    }
}

pub fn random_features(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Tensor {
    let data = (0..h * w * c).map(|_| gaussian(rng)).collect();
    Tensor::new(vec![h, w, c], data).unwrap()
}

pub fn rows_from_tensor(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks_exact(t.channels()).map(<[f64]>::to_vec).collect()
}

/// Largest deviation of `e_step`/`m_step` from the direct-summation oracle
/// over `instances` random problems with N ≤ 50, K ≤ 5, C ≤ 16.
pub fn em_oracle_deviation(instances: usize, seed: u64) -> f64 {
    use pmmseg_core::em::{e_step, m_step, Origin, SampleSet};
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let n = rng.gen_range(1..=50);
        let k = rng.gen_range(1..=5);
        let c = rng.gen_range(1..=16);
        let unit = i % 2 == 0;
        let kernel = if i % 3 == 0 { Kernel::Gaussian } else { Kernel::Vmf };
        let kappa = [1.0, 20.0][i % 2];
        let rows = random_rows(&mut rng, n, c, unit);
        let means = random_rows(&mut rng, k, c, unit);
        let set = SampleSet::from_rows(&rows, Origin::Foreground).unwrap();
        let e = e_step(&set, &means, kernel, kappa).unwrap();
        let e_rows: Vec<Vec<f64>> = (0..n).map(|r| e.row(r).to_vec()).collect();
        let e_oracle = oracle_e_step(&rows, &means, kernel, kappa);
        worst = worst.max(max_abs_diff_rows(&e_rows, &e_oracle));
        let soft: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        let resp = pmmseg_core::em::Responsibilities::new(n, k, soft.concat()).unwrap();
        let m = m_step(&set, &resp).unwrap();
        worst = worst.max(max_abs_diff_rows(&m, &oracle_m_step(&rows, &soft)));
    }
    worst
}

/// Largest gap between single-prototype fits and masked average pooling
/// (foreground and background) over random features and masks.
pub fn single_prototype_deviation(instances: usize, seed: u64) -> f64 {
    use pmmseg_core::em::{fit_pmm, partition_support, EmConfig};
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (h, w, c) = (rng.gen_range(2..=12), rng.gen_range(2..=12), rng.gen_range(1..=16));
        let features = random_features(&mut rng, h, w, c);
        let mask = random_mask(&mut rng, w, h);
        let (pos, neg) = partition_support(&features, &mask).unwrap();
        let cfg = EmConfig {
            k: 1,
            seed: i as u64,
            kernel: if i % 2 == 0 { Kernel::Vmf } else { Kernel::Gaussian },
            ..EmConfig::default()
        };
        let protos = fit_pmm(&pos, &neg, &cfg).unwrap();
        let fg = oracle_masked_mean(&features, &mask, 1);
        let bg = oracle_masked_mean(&features, &mask, 0);
        worst = worst
            .max(max_abs_diff_rows(&protos.mu_pos, &[fg]))
            .max(max_abs_diff_rows(&protos.mu_neg, &[bg]));
    }
    worst
}

pub struct ClusterRecovery {
    /// Largest cosine distance between a fitted prototype and its matched
    /// cluster mean under the best bijection.
    pub max_cosine_distance: f64,
    pub residual: f64,
}

pub fn cluster_recovery(seed: u64) -> ClusterRecovery {
    use pmmseg_core::em::{fit_mixture, self_consistency_residual, EmConfig, Origin, SampleSet};
    let mut rng = rng(seed);
    let (rows, truth) = three_clusters(&mut rng, 16, 40, 0.08);
    let set = SampleSet::from_rows(&rows, Origin::Foreground).unwrap();
    let cfg = EmConfig {
        k: 3,
        seed,
        ..EmConfig::default()
    };
    let fit = fit_mixture(&set, &cfg).unwrap();
    let best = permutations(3)
        .into_iter()
        .map(|p| {
            (0..3)
                .map(|j| cosine_distance(&fit.means[p[j]], &truth[j]))
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    ClusterRecovery {
        max_cosine_distance: best,
        residual: self_consistency_residual(&set, &fit.means, cfg.kernel, cfg.kappa).unwrap(),
    }
}

pub mod net {
    use super::*;
    use pmmseg_core::data::{sample_episode, Episode, Phase, ShapeGenerator, SplitSpec};
    use pmmseg_core::net::{BranchFit, EmPolicy, EpisodeInput, ModelConfig, PmmNet, ResidualMode};
    use pmmseg_core::tensor::Tape;

    /// A few-channel model on 16×16 images.
    pub fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            k: 2,
            branches: 2,
            encoder_widths: [3, 3, 4, 4],
            aspp_width: 3,
            head_width: 3,
            image_size: 16,
            init_seed: seed,
            em_seed: seed ^ 0x55,
            ..ModelConfig::default()
        }
    }

    pub fn episode(cfg: &ModelConfig, shots: usize, seed: u64) -> Episode {
        let g = ShapeGenerator::new(cfg.image_size, cfg.feature_size()).unwrap();
        let split = SplitSpec::for_fold(0).unwrap();
        sample_episode(&g, &split, Phase::Train, shots, &mut rng(seed)).unwrap()
    }

    /// `onehot(gt) − softmax(logits)` per pixel.
    pub fn oracle_residual_goal(logits: &Tensor, gt: &Mask) -> Tensor {
        let mut data = Vec::with_capacity(logits.len());
        for (px, &g) in logits.data().chunks_exact(2).zip(gt.values()) {
            let p_fg = 1.0 / (1.0 + (px[0] - px[1]).exp());
            data.push((1.0 - g as f64) - (1.0 - p_fg));
            data.push(g as f64 - p_fg);
        }
        Tensor::new(logits.shape().to_vec(), data).unwrap()
    }

    /// Loss of `net` on `ep` with EM replayed from `fits`. In residual-target
    /// mode the regression goals are the given constants.
    fn replayed_loss(net: &PmmNet, input: &EpisodeInput, ep: &Episode, fits: &[BranchFit], goals: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let vars = net.params().register_frozen(&mut tape);
        let fwd = net.forward(&mut tape, &vars, input, EmPolicy::Replay(fits)).unwrap();
        if net.config().residual_mode == ResidualMode::PartialSums {
            let loss = net.loss(&mut tape, &fwd, &ep.query.mask).unwrap();
            return tape.value(loss.total).item();
        }
        let first = tape.cross_entropy_2d(fwd.branches[0].cumulative, &ep.query.mask).unwrap();
        let mut total = tape.value(first).item();
        for (b, goal) in fwd.branches[1..].iter().zip(goals) {
            let mse = tape.mean_squared_error(b.residual, goal).unwrap();
            total += tape.value(mse).item();
        }
        total
    }

    /// Worst per-tensor relative error between backprop and central
    /// differences, probing `probes` entries of every parameter tensor.
    /// EM results are replayed so both sides hold responsibilities fixed, and
    /// biases are randomized so no relu input sits exactly on its kink.
    pub fn full_loss_gradient_error(cfg: ModelConfig, seed: u64, probes: usize) -> (f64, String) {
        let mut net = PmmNet::new(cfg.clone()).unwrap();
        let mut rng = rng(seed ^ 0xFD);
        for i in 0..net.params().len() {
            if net.params().entries()[i].name.ends_with("bias") {
                net.params_mut().tensor_mut(i).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            }
        }
        let ep = episode(&cfg, 1, seed);
        let input = EpisodeInput::from_episode(&ep, &cfg).unwrap();
        let mut tape = Tape::new();
        let vars = net.params().register(&mut tape);
        let fwd = net.forward(&mut tape, &vars, &input, EmPolicy::Fit).unwrap();
        let loss = net.loss(&mut tape, &fwd, &ep.query.mask).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let fits = fwd.fits.clone();
        let goals: Vec<Tensor> = fwd.branches[..fwd.branches.len() - 1]
            .iter()
            .map(|b| oracle_residual_goal(tape.value(b.cumulative), &ep.query.mask))
            .collect();
        let at_base = replayed_loss(&net, &input, &ep, &fits, &goals);
        assert!((at_base - tape.value(loss.total).item()).abs() < 1e-12, "oracle loss {at_base}");
        let h = 1e-5;
        let mut worst = (0.0, String::new());
        for (i, &var) in vars.iter().enumerate() {
            let analytic = grads.get_slice(var).map(<[f64]>::to_vec).unwrap_or_default();
            let len = net.params().tensor(i).len();
            let picks: Vec<usize> = if len <= probes { (0..len).collect() } else { (0..probes).map(|_| rng.gen_range(0..len)).collect() };
            let mut diff2 = 0.0;
            let mut a2: f64 = 0.0;
            let mut n2: f64 = 0.0;
            for &j in &picks {
                let orig = net.params().tensor(i).data()[j];
                net.params_mut().tensor_mut(i).data_mut()[j] = orig + h;
                let up = replayed_loss(&net, &input, &ep, &fits, &goals);
                net.params_mut().tensor_mut(i).data_mut()[j] = orig - h;
                let down = replayed_loss(&net, &input, &ep, &fits, &goals);
                net.params_mut().tensor_mut(i).data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(j).copied().unwrap_or(0.0);
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
            }
            let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, net.params().entries()[i].name.clone());
            }
        }
        worst
    }

    pub struct Overfit {
        pub steps: usize,
        /// Cross-entropy of each cumulative prediction after the last step.
        pub per_branch: Vec<f64>,
    }

    /// Trains the default model on one fixed episode until the final
    /// cross-entropy drops below `target` or `max_steps` pass.
    pub fn overfit_single_episode(seed: u64, max_steps: usize, target: f64) -> Overfit {
        use pmmseg_core::train::{TrainConfig, Trainer};
        let model = ModelConfig::default();
        let cfg = TrainConfig {
            iterations: max_steps,
            batch_episodes: 1,
            ..TrainConfig::default()
        };
        let ep = episode(&model, 1, seed);
        let input = EpisodeInput::from_episode(&ep, &model).unwrap();
        let mut trainer = Trainer::new(PmmNet::new(model).unwrap(), cfg).unwrap();
        let mut per_branch = Vec::new();
        for step in 1..=max_steps {
            trainer.train_step(std::slice::from_ref(&ep)).unwrap();
            let net = trainer.net();
            let mut tape = Tape::new();
            let vars = net.params().register_frozen(&mut tape);
            let fwd = net.forward(&mut tape, &vars, &input, EmPolicy::Fit).unwrap();
            per_branch = net.loss(&mut tape, &fwd, &ep.query.mask).unwrap().per_branch;
            if per_branch.last().is_some_and(|&ce| ce < target) {
                return Overfit { steps: step, per_branch };
            }
        }
        Overfit {
            steps: max_steps,
            per_branch,
        }
    }

    /// Largest deviation from 1 of the per-pixel sums of all 2K maps and of
    /// the fused pair, over `passes` random models and episodes.
    pub fn probability_map_normalization(passes: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        let mut r = rng(seed);
        for pass in 0..passes {
            let mut cfg = tiny_config(r.gen());
            cfg.k = r.gen_range(1..=4);
            cfg.branches = r.gen_range(1..=3);
            cfg.softmax_scope = if pass % 4 == 3 {
                pmmseg_core::net::SoftmaxScope::PerPair
            } else {
                pmmseg_core::net::SoftmaxScope::Joint
            };
            let net = PmmNet::new(cfg.clone()).unwrap();
            let ep = episode(&cfg, r.gen_range(1..=2), r.gen());
            let pred = net.predict(&EpisodeInput::from_episode(&ep, &cfg).unwrap()).unwrap();
            for (maps, fused) in pred.per_prototype.iter().zip(&pred.fused) {
                let k2 = maps.channels();
                let k = k2 / 2;
                for px in maps.data().chunks_exact(k2) {
                    if cfg.softmax_scope == pmmseg_core::net::SoftmaxScope::Joint {
                        worst = worst.max((px.iter().sum::<f64>() - 1.0).abs());
                    } else {
                        for j in 0..k {
                            worst = worst.max((px[j] + px[k + j] - 1.0).abs());
                        }
                    }
                }
                for px in fused.data().chunks_exact(2) {
                    worst = worst.max((px[0] + px[1] - 1.0).abs());
                }
            }
        }
        worst
    }
}

pub mod grad {
    use super::*;
    use pmmseg_core::tensor::{Tape, Var};

    pub const FD_STEP: f64 = 1e-5;
    pub const OP_TOLERANCE: f64 = 1e-6;

    pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Reduces any tensor to a scalar as `Σ out ⊙ probe` so every output element
    /// carries a distinct weight.
    pub fn probe_sum(tape: &mut Tape, out: Var, probe: &Tensor) -> Var {
        let p = tape.constant(probe.clone());
        let prod = tape.elementwise_mul(out, p).unwrap();
        let flat = tape.reshape(prod, &[1, probe.len()]).unwrap();
        let total = tape.sum_channels(flat).unwrap();
        tape.reshape(total, &[1]).unwrap()
    }

    /// Checks analytic gradients of `build` against central differences for every
    /// input, returning the worst norm-wise relative error.
    pub fn gradient_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };

        let mut worst = 0.0f64;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; input.len()]);
            let mut numeric = vec![0.0; input.len()];
            #[allow(clippy::needless_range_loop)]
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[idx].data_mut()[j] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[idx].data_mut()[j] -= FD_STEP;
                numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
            let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(1e-12, f64::max);
            worst = worst.max(diff / scale);
        }
        worst
    }

    /// One finite-difference check per tape op, on small random inputs.
    pub fn per_op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
        let mut rng = super::rng(seed);
        let mut out = Vec::new();
        let mut check = |name, inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var| {
            out.push((name, gradient_error(inputs, build)));
        };
        let x = random_tensor(&[5, 4, 2], &mut rng);
        let kernel = random_tensor(&[3, 3, 2, 3], &mut rng);
        let probe = random_tensor(&[3, 2, 3], &mut rng);
        check("conv2d_dilated", &[x.clone(), kernel], &|t, v| {
            let y = t.conv2d_dilated(v[0], v[1], 2, 2, 2).unwrap();
            probe_sum(t, y, &probe)
        });
        let a = random_tensor(&[3, 2, 4], &mut rng);
        let b = random_tensor(&[3, 2, 4], &mut rng);
        let bias = random_tensor(&[4], &mut rng);
        let probe = random_tensor(&[3, 2, 4], &mut rng);
        check("relu", std::slice::from_ref(&a), &|t, v| {
            let y = t.relu(v[0]).unwrap();
            probe_sum(t, y, &probe)
        });
        check("add", &[a.clone(), b.clone()], &|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            probe_sum(t, y, &probe)
        });
        check("elementwise_mul", &[a.clone(), b.clone()], &|t, v| {
            let y = t.elementwise_mul(v[0], v[1]).unwrap();
            probe_sum(t, y, &probe)
        });
        check("scale", std::slice::from_ref(&a), &|t, v| {
            let y = t.scale(v[0], -2.5).unwrap();
            probe_sum(t, y, &probe)
        });
        check("add_channel_bias", &[a.clone(), bias], &|t, v| {
            let y = t.add_channel_bias(v[0], v[1]).unwrap();
            probe_sum(t, y, &probe)
        });
        let probe6 = random_tensor(&[3, 2, 6], &mut rng);
        check("concat_channels", &[a.clone(), b.clone()], &|t, v| {
            let y = t.concat_channels(&[v[0], v[1]]).unwrap();
            let y = t.slice_channels(y, 1, 7).unwrap();
            probe_sum(t, y, &probe6)
        });
        let probe1 = random_tensor(&[3, 2, 1], &mut rng);
        check("sum_channels", std::slice::from_ref(&a), &|t, v| {
            let y = t.sum_channels(v[0]).unwrap();
            probe_sum(t, y, &probe1)
        });
        check("softmax_channels", std::slice::from_ref(&a), &|t, v| {
            let y = t.softmax_channels(v[0]).unwrap();
            probe_sum(t, y, &probe)
        });
        let probe_m = random_tensor(&[1, 1, 4], &mut rng);
        check("global_mean", std::slice::from_ref(&a), &|t, v| {
            let y = t.global_mean(v[0]).unwrap();
            probe_sum(t, y, &probe_m)
        });
        let probe_up = random_tensor(&[7, 9, 2], &mut rng);
        check("bilinear_resize", &[x], &|t, v| {
            let y = t.bilinear_resize(v[0], 7, 9).unwrap();
            probe_sum(t, y, &probe_up)
        });
        let grid = random_tensor(&[3, 3, 4], &mut rng);
        let probe_g = random_tensor(&[4, 4], &mut rng);
        check("gather_rows", &[grid], &|t, v| {
            let y = t.gather_rows(v[0], &[0, 4, 4, 8]).unwrap();
            probe_sum(t, y, &probe_g)
        });
        let r1 = random_tensor(&[2, 4], &mut rng);
        let r2 = random_tensor(&[3, 4], &mut rng);
        let probe5 = random_tensor(&[5, 4], &mut rng);
        check("concat_rows", &[r1, r2], &|t, v| {
            let y = t.concat_rows(&[v[0], v[1]]).unwrap();
            probe_sum(t, y, &probe5)
        });
        let samples = random_tensor(&[6, 4], &mut rng);
        let weights = Tensor::new(vec![6, 2], (0..12).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
        let probe_k = random_tensor(&[2, 4], &mut rng);
        check("weighted_mean_rows", &[samples.clone(), weights], &|t, v| {
            let y = t.weighted_mean_rows(v[0], v[1]).unwrap();
            probe_sum(t, y, &probe_k)
        });
        let probe_n = random_tensor(&[6, 4], &mut rng);
        check("l2_normalize_rows", std::slice::from_ref(&samples), &|t, v| {
            let y = t.l2_normalize_rows(v[0]).unwrap();
            probe_sum(t, y, &probe_n)
        });
        let small = Tensor::new(vec![6, 4], samples.data().iter().map(|v| v * 0.2).collect()).unwrap();
        let protos = random_tensor(&[3, 4], &mut rng);
        let small_p = Tensor::new(vec![3, 4], protos.data().iter().map(|v| v * 0.2).collect()).unwrap();
        let probe_e = random_tensor(&[6, 3], &mut rng);
        check("responsibilities", &[small, small_p], &|t, v| {
            let y = t.responsibilities(v[0], v[1], 20.0, Kernel::Vmf).unwrap();
            probe_sum(t, y, &probe_e)
        });
        let logits = random_tensor(&[4, 4, 2], &mut rng);
        let target = Mask::from_fn(4, 4, |x, y| (x * 3 + y) % 3 == 0);
        check("cross_entropy_2d", std::slice::from_ref(&logits), &|t, v| t.cross_entropy_2d(v[0], &target).unwrap());
        let goal = random_tensor(&[4, 4, 2], &mut rng);
        check("mean_squared_error", &[logits], &|t, v| t.mean_squared_error(v[0], &goal).unwrap());
        out
    }
}
