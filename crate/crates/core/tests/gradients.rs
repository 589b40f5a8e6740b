//! Analytic gradients against finite differences and loop oracles.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileseg::nnet::{
    conv3d_backward, conv3d_forward, dice_loss_with, one_hot, softmax_channels, DiceOptions, Tensor,
};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-deep loop cross-correlation with zero padding.
fn conv_oracle(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let [cin, d, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [cout, _, k, _, _] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], 0, 0];
    let od = d + 2 * pad + 1 - k;
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * od * oh * ow];
    for co in 0..cout {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for a in 0..k {
                            for b in 0..k {
                                for c in 0..k {
                                    let iz = z as isize + a as isize - pad as isize;
                                    let iy = y as isize + b as isize - pad as isize;
                                    let ix = xo as isize + c as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ci * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                    let wi = (((co * cin + ci) * k + a) * k + b) * k + c;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                    }
                    out[((co * od + z) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let (k, pad) = if rng.random_bool(0.5) { (3, 1) } else { (1, 0) };
        let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
        let input = random_tensor(&mut rng, &[cin, dims[0], dims[1], dims[2]]);
        let weight = random_tensor(&mut rng, &[cout, cin, k, k, k]);
        let bias = random_tensor(&mut rng, &[cout]);
        let got = conv3d_forward(&input, &weight, &bias, pad).unwrap();
        let want = conv_oracle(&input, &weight, &bias, pad);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-6;
    for _ in 0..5 {
        let cin = rng.random_range(1..=2);
        let cout = rng.random_range(1..=2);
        let dims = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4)];
        let mut input = random_tensor(&mut rng, &[cin, dims[0], dims[1], dims[2]]);
        let mut weight = random_tensor(&mut rng, &[cout, cin, 3, 3, 3]);
        let mut bias = random_tensor(&mut rng, &[cout]);
        let out = conv3d_forward(&input, &weight, &bias, 1).unwrap();
        // Loss = Σ r·out, so dL/dout = r.
        let r = random_tensor(&mut rng, out.shape());
        let loss = |i: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let o = conv3d_forward(i, w, b, 1).unwrap();
            o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (gi, gw, gb) = conv3d_backward(&input, &weight, &r, 1).unwrap();
        for idx in 0..input.len() {
            let v = input.data()[idx];
            input.data_mut()[idx] = v + h;
            let lp = loss(&input, &weight, &bias);
            input.data_mut()[idx] = v - h;
            let lm = loss(&input, &weight, &bias);
            input.data_mut()[idx] = v;
            assert!(((lp - lm) / (2.0 * h) - gi.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..weight.len() {
            let v = weight.data()[idx];
            weight.data_mut()[idx] = v + h;
            let lp = loss(&input, &weight, &bias);
            weight.data_mut()[idx] = v - h;
            let lm = loss(&input, &weight, &bias);
            weight.data_mut()[idx] = v;
            assert!(((lp - lm) / (2.0 * h) - gw.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..bias.len() {
            let v = bias.data()[idx];
            bias.data_mut()[idx] = v + h;
            let lp = loss(&input, &weight, &bias);
            bias.data_mut()[idx] = v - h;
            let lm = loss(&input, &weight, &bias);
            bias.data_mut()[idx] = v;
            assert!(((lp - lm) / (2.0 * h) - gb.data()[idx]).abs() < 1e-6);
        }
    }
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-6;
    for include_background in [false, true] {
        let opts = DiceOptions {
            include_background,
            ..DiceOptions::default()
        };
        let c = 3;
        let spatial = [2, 3, 2];
        let n = 12;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let truth = one_hot::<f64>(&labels, c, spatial).unwrap();
        let logits = random_tensor(&mut rng, &[c, 2, 3, 2]);
        let mut probs = softmax_channels(&logits).unwrap();
        let (_, grad) = dice_loss_with(&probs, &truth, opts).unwrap();
        for i in 0..probs.len() {
            let v = probs.data()[i];
            probs.data_mut()[i] = v + h;
            let (lp, _) = dice_loss_with(&probs, &truth, opts).unwrap();
            probs.data_mut()[i] = v - h;
            let (lm, _) = dice_loss_with(&probs, &truth, opts).unwrap();
            probs.data_mut()[i] = v;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-7, "{numeric} vs {}", grad.data()[i]);
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..20 {
        let r = common::gradient_check(seed);
        assert!(r.checked > 0, "{}", r.description);
        assert!(r.max_rel_error < 1e-4, "seed {seed} ({}): {}", r.description, r.max_rel_error);
    }
}
