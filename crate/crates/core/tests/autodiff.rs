//! Forward oracles and finite-difference gradient checks for every tape op.

mod common;

use pmmseg_core::em::Kernel;
use pmmseg_core::image::Mask;
use pmmseg_core::seed;
use pmmseg_core::tensor::{Tape, Tensor, Var};
use rand::Rng;

use common::grad::*;

fn assert_grad(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    let err = gradient_error(inputs, build);
    assert!(err < OP_TOLERANCE, "{name}: relative gradient error {err:e}");
}

/// Direct quadruple-loop convolution.
fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize, dil: usize) -> Tensor {
    let (h, w, cin) = input.dims3().unwrap();
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky * dil) as isize - pad as isize;
                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += input.at3(iy as usize, ix as usize, ci)
                                * kernel.data()[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).unwrap()
}

#[test]
fn conv_identity_and_sum_of_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1], vec![3.25]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.25]);

    let x = tape.constant(Tensor::full(&[3, 3, 1], 1.0));
    let k = tape.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 3, 1]);
    assert_eq!(tape.value(y).at3(1, 1, 0), 9.0);
    assert_eq!(tape.value(y).at3(0, 0, 0), 4.0);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = seed::rng(11);
    let cases = [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1), (1, 4, 4)];
    for (stride, pad, dil) in cases {
        let input = random_tensor(&[5, 5, 2], &mut rng);
        let kernel = random_tensor(&[3, 3, 2, 4], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let k = tape.constant(kernel.clone());
        let y = tape.conv2d_dilated(x, k, stride, pad, dil).unwrap();
        let want = naive_conv(&input, &kernel, stride, pad, dil);
        assert_eq!(tape.shape(y), want.shape());
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad} dil {dil}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 4, 3]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 2, 1]));
    assert!(tape.conv2d(x, k, 1, 1).is_err());
    let even = tape.constant(Tensor::zeros(&[2, 2, 3, 1]));
    assert!(tape.conv2d(x, even, 1, 0).is_err());
}

#[test]
fn every_op_passes_a_finite_difference_check() {
    for (name, err) in per_op_gradient_errors(11) {
        assert!(err < OP_TOLERANCE, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn conv_gradients() {
    let mut rng = seed::rng(12);
    for (stride, pad, dil) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 1)] {
        let input = random_tensor(&[5, 4, 2], &mut rng);
        let kernel = random_tensor(&[3, 3, 2, 3], &mut rng);
        let probe_shape = naive_conv(&input, &kernel, stride, pad, dil).shape().to_vec();
        let probe = random_tensor(&probe_shape, &mut rng);
        assert_grad("conv2d", &[input, kernel], &|t, v| {
            let y = t.conv2d_dilated(v[0], v[1], stride, pad, dil).unwrap();
            probe_sum(t, y, &probe)
        });
    }
    let input = random_tensor(&[3, 3, 4], &mut rng);
    let kernel = random_tensor(&[1, 1, 4, 2], &mut rng);
    let probe = random_tensor(&[3, 3, 2], &mut rng);
    assert_grad("conv2d 1×1", &[input, kernel], &|t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0).unwrap();
        probe_sum(t, y, &probe)
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = seed::rng(13);
    let a = random_tensor(&[3, 2, 4], &mut rng);
    let b = random_tensor(&[3, 2, 4], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    let probe = random_tensor(&[3, 2, 4], &mut rng);
    assert_grad("relu", std::slice::from_ref(&a), &|t, v| {
        let y = t.relu(v[0]).unwrap();
        probe_sum(t, y, &probe)
    });
    assert_grad("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        probe_sum(t, y, &probe)
    });
    assert_grad("elementwise_mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.elementwise_mul(v[0], v[1]).unwrap();
        probe_sum(t, y, &probe)
    });
    assert_grad("scale", std::slice::from_ref(&a), &|t, v| {
        let y = t.scale(v[0], -2.5).unwrap();
        probe_sum(t, y, &probe)
    });
    assert_grad("add_channel_bias", &[a.clone(), bias], &|t, v| {
        let y = t.add_channel_bias(v[0], v[1]).unwrap();
        probe_sum(t, y, &probe)
    });
}

#[test]
fn channel_op_gradients() {
    let mut rng = seed::rng(14);
    let a = random_tensor(&[3, 3, 2], &mut rng);
    let b = random_tensor(&[3, 3, 3], &mut rng);
    let probe5 = random_tensor(&[3, 3, 5], &mut rng);
    assert_grad("concat_channels", &[a.clone(), b.clone()], &|t, v| {
        let y = t.concat_channels(&[v[0], v[1], v[0]]).unwrap();
        let y = t.slice_channels(y, 0, 5).unwrap();
        probe_sum(t, y, &probe5)
    });
    let probe2 = random_tensor(&[3, 3, 2], &mut rng);
    assert_grad("slice_channels", std::slice::from_ref(&b), &|t, v| {
        let y = t.slice_channels(v[0], 1, 3).unwrap();
        probe_sum(t, y, &probe2)
    });
    let probe1 = random_tensor(&[3, 3, 1], &mut rng);
    assert_grad("sum_channels", std::slice::from_ref(&b), &|t, v| {
        let y = t.sum_channels(v[0]).unwrap();
        probe_sum(t, y, &probe1)
    });
    let probe3 = random_tensor(&[3, 3, 3], &mut rng);
    assert_grad("softmax_channels", std::slice::from_ref(&b), &|t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        probe_sum(t, y, &probe3)
    });
    let probe_m = random_tensor(&[1, 1, 3], &mut rng);
    assert_grad("global_mean", std::slice::from_ref(&b), &|t, v| {
        let y = t.global_mean(v[0]).unwrap();
        probe_sum(t, y, &probe_m)
    });
    let probe_r = random_tensor(&[9, 3], &mut rng);
    assert_grad("reshape", &[b], &|t, v| {
        let y = t.reshape(v[0], &[9, 3]).unwrap();
        probe_sum(t, y, &probe_r)
    });
}

#[test]
fn bilinear_gradients_up_and_down() {
    let mut rng = seed::rng(15);
    let x = random_tensor(&[4, 3, 2], &mut rng);
    for (oh, ow) in [(7, 9), (2, 2), (4, 3), (1, 5)] {
        let probe = random_tensor(&[oh, ow, 2], &mut rng);
        assert_grad("bilinear_resize", std::slice::from_ref(&x), &|t, v| {
            let y = t.bilinear_resize(v[0], oh, ow).unwrap();
            probe_sum(t, y, &probe)
        });
    }
    let one = random_tensor(&[1, 1, 3], &mut rng);
    let probe = random_tensor(&[4, 4, 3], &mut rng);
    assert_grad("bilinear tile", &[one], &|t, v| {
        let y = t.bilinear_resize(v[0], 4, 4).unwrap();
        probe_sum(t, y, &probe)
    });
}

#[test]
fn bilinear_identity_and_constant() {
    let mut rng = seed::rng(16);
    let x = random_tensor(&[5, 6, 3], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let same = tape.bilinear_resize(v, 5, 6).unwrap();
    assert_eq!(tape.value(same), &x);

    let c = tape.constant(Tensor::full(&[3, 4, 2], 0.7));
    for (oh, ow) in [(1, 1), (9, 2), (17, 13)] {
        let y = tape.bilinear_resize(c, oh, ow).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
    assert!(tape.bilinear_resize(c, 0, 3).is_err());

    // Corner alignment: corners map exactly onto corners.
    let y = tape.bilinear_resize(v, 9, 11).unwrap();
    assert_eq!(tape.value(y).at3(8, 10, 2), x.at3(4, 5, 2));
    assert_eq!(tape.value(y).at3(0, 0, 1), x.at3(0, 0, 1));
}

#[test]
fn row_op_gradients() {
    let mut rng = seed::rng(17);
    let grid = random_tensor(&[3, 3, 4], &mut rng);
    let probe = random_tensor(&[4, 4], &mut rng);
    assert_grad("gather_rows", std::slice::from_ref(&grid), &|t, v| {
        let y = t.gather_rows(v[0], &[0, 4, 4, 8]).unwrap();
        probe_sum(t, y, &probe)
    });
    let a = random_tensor(&[2, 4], &mut rng);
    let b = random_tensor(&[3, 4], &mut rng);
    let probe5 = random_tensor(&[5, 4], &mut rng);
    assert_grad("concat_rows", &[a.clone(), b], &|t, v| {
        let y = t.concat_rows(&[v[0], v[1]]).unwrap();
        probe_sum(t, y, &probe5)
    });
    let samples = random_tensor(&[6, 4], &mut rng);
    let weights = Tensor::new(vec![6, 2], (0..12).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
    let probe_k = random_tensor(&[2, 4], &mut rng);
    assert_grad("weighted_mean_rows", &[samples.clone(), weights], &|t, v| {
        let y = t.weighted_mean_rows(v[0], v[1]).unwrap();
        probe_sum(t, y, &probe_k)
    });
    let probe_n = random_tensor(&[6, 4], &mut rng);
    assert_grad("l2_normalize_rows", std::slice::from_ref(&samples), &|t, v| {
        let y = t.l2_normalize_rows(v[0]).unwrap();
        probe_sum(t, y, &probe_n)
    });
    let protos = random_tensor(&[3, 4], &mut rng);
    let probe_e = random_tensor(&[6, 3], &mut rng);
    for (kernel, kappa) in [(Kernel::Vmf, 2.0), (Kernel::Vmf, 20.0), (Kernel::Gaussian, 1.5)] {
        let small = Tensor::new(vec![6, 4], samples.data().iter().map(|v| v * 0.2).collect()).unwrap();
        let small_p = Tensor::new(vec![3, 4], protos.data().iter().map(|v| v * 0.2).collect()).unwrap();
        assert_grad("responsibilities", &[small, small_p], &|t, v| {
            let y = t.responsibilities(v[0], v[1], kappa, kernel).unwrap();
            probe_sum(t, y, &probe_e)
        });
    }
}

fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.gen_bool(0.5))
}

/// Per-pixel summation straight from the definition.
fn cross_entropy_oracle(logits: &Tensor, target: &Mask) -> f64 {
    let (h, w, _) = logits.dims3().unwrap();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let z0 = logits.at3(y, x, 0);
            let z1 = logits.at3(y, x, 1);
            let p = [z0.exp() / (z0.exp() + z1.exp()), z1.exp() / (z0.exp() + z1.exp())];
            total -= p[target.get(x, y) as usize].ln();
        }
    }
    total / (h * w) as f64
}

#[test]
fn cross_entropy_values() {
    let mut rng = seed::rng(18);
    let logits = random_tensor(&[4, 4, 2], &mut rng);
    let target = random_mask(4, 4, &mut rng);
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy_2d(l, &target).unwrap();
    assert!((tape.value(loss).item() - cross_entropy_oracle(&logits, &target)).abs() < 1e-12);

    let uniform = tape.constant(Tensor::full(&[3, 5, 2], 0.3));
    let loss = tape.cross_entropy_2d(uniform, &random_mask(3, 5, &mut rng)).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let ones = Mask::new(2, 2, vec![1; 4]).unwrap();
    let confident = tape.constant(Tensor::new(vec![2, 2, 2], [-40.0, 40.0].repeat(4)).unwrap());
    let loss = tape.cross_entropy_2d(confident, &ones).unwrap();
    assert!(tape.value(loss).item() < 1e-30);

    let wrong = Mask::zeros(3, 2);
    assert!(tape.cross_entropy_2d(l, &wrong).is_err());
}

#[test]
fn loss_gradients() {
    let mut rng = seed::rng(19);
    let logits = random_tensor(&[4, 4, 2], &mut rng);
    let target = random_mask(4, 4, &mut rng);
    assert_grad("cross_entropy_2d", std::slice::from_ref(&logits), &|t, v| t.cross_entropy_2d(v[0], &target).unwrap());
    let goal = random_tensor(&[4, 4, 2], &mut rng);
    assert_grad("mean_squared_error", &[logits], &|t, v| t.mean_squared_error(v[0], &goal).unwrap());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = seed::rng(20);
    let x = random_tensor(&[6, 6, 5], &mut rng);
    let scaled = Tensor::new(vec![6, 6, 5], x.data().iter().map(|v| v * 8.0).collect()).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(scaled);
    let y = tape.softmax_channels(v).unwrap();
    for row in tape.value(y).data().chunks_exact(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let pair = tape.constant(Tensor::zeros(&[1, 1, 2]));
    let y = tape.softmax_channels(pair).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn backward_leaves_inputs_untouched_and_fills_leaf_grads() {
    let mut rng = seed::rng(21);
    let x = random_tensor(&[4, 4, 2], &mut rng);
    let k = random_tensor(&[3, 3, 2, 2], &mut rng);
    let target = random_mask(4, 4, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let kv = tape.param(k.clone());
    let unused = tape.param(Tensor::zeros(&[2]));
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    let y = tape.relu(y).unwrap();
    let loss = tape.cross_entropy_2d(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(tape.value(xv), &x);
    assert_eq!(tape.value(kv), &k);
    assert_eq!(grads.get(xv).unwrap().shape(), x.shape());
    assert_eq!(grads.get(kv).unwrap().shape(), k.shape());
    assert!(grads.get(unused).is_none());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1], 1e300));
    assert!(tape.scale(x, 1e300).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 2, 1]));
    let b = tape.constant(Tensor::zeros(&[2, 1, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.elementwise_mul(a, b).is_err());
    assert!(tape.concat_channels(&[a, b]).is_err());
}
