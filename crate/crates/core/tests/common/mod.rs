#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tileseg::nnet::{
    dice_loss_with, forward_raw, init_params, loss_and_grads, one_hot, DiceOptions, ModelParams,
    NetworkConfig,
};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub description: String,
}

fn loss_at(params: &ModelParams<f64>, data: &[f32], dims: [usize; 3], truth: &tileseg::nnet::Tensor<f64>, dice: DiceOptions) -> (f64, Vec<bool>) {
    let (probs, cache) = forward_raw(data, dims, params).unwrap();
    let (loss, _) = dice_loss_with(&probs, truth, dice).unwrap();
    let pattern = cache
        .activations()
        .iter()
        .flat_map(|a| a.iter().map(|&v| v > 0.0))
        .collect();
    (loss, pattern)
}

/// End-to-end analytic gradients against central differences on one random
/// instance. Parameters whose ± perturbation flips any ReLU are skipped.
pub fn gradient_check(seed: u64) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.random_range(3..=8), rng.random_range(3..=8), rng.random_range(3..=8)];
    let classes = rng.random_range(2..=4);
    let config = NetworkConfig {
        in_channels: 1,
        hidden_channels: rng.random_range(1..=3),
        hidden_layers: rng.random_range(1..=2),
        num_classes: classes,
        normalize_input: false,
    };
    let dice = DiceOptions {
        include_background: rng.random_bool(0.5),
        ..DiceOptions::default()
    };
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut params: ModelParams<f64> = init_params(&config, seed ^ 0xabcd).unwrap();
    // Non-zero biases so the check covers them too.
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let (_, grads) = loss_and_grads(&params, &data, dims, &labels, dice).unwrap();
    let truth = one_hot::<f64>(&labels, classes, [dims[2], dims[1], dims[0]]).unwrap();

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for ti in 0..params.tensors().len() {
        for i in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[i];
            params.tensors_mut()[ti].data_mut()[i] = orig + FD_STEP;
            let (lp, pp) = loss_at(&params, &data, dims, &truth, dice);
            params.tensors_mut()[ti].data_mut()[i] = orig - FD_STEP;
            let (lm, pm) = loss_at(&params, &data, dims, &truth, dice);
            params.tensors_mut()[ti].data_mut()[i] = orig;
            if pp != pm {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = grads[ti].data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic - numeric).abs() / scale);
            checked += 1;
        }
    }
    GradientCheck {
        max_rel_error: max_rel,
        checked,
        skipped_kinks: skipped,
        description: format!(
            "dims {dims:?}, {classes} classes, hidden {}x{}, background {}",
            config.hidden_layers, config.hidden_channels, dice.include_background
        ),
    }
}

/// Brute-force majority vote: a full per-voxel histogram of every covering tile.
pub fn fusion_oracle(dims: [usize; 3], tile: [usize; 3], tiles: &[([usize; 3], Vec<u32>)]) -> Vec<u32> {
    let mut out = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut hist = std::collections::BTreeMap::<u32, usize>::new();
                for (o, labels) in tiles {
                    if x >= o[0] && x < o[0] + tile[0] && y >= o[1] && y < o[1] + tile[1] && z >= o[2] && z < o[2] + tile[2] {
                        let i = (x - o[0]) + tile[0] * ((y - o[1]) + tile[1] * (z - o[2]));
                        *hist.entry(labels[i]).or_default() += 1;
                    }
                }
                let best = hist.values().copied().max().unwrap();
                out.push(*hist.iter().find(|(_, &c)| c == best).unwrap().0);
            }
        }
    }
    out
}

/// Set-intersection Dice for one label.
pub fn dice_oracle(a: &[u32], b: &[u32], label: u32) -> Option<f64> {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i] == label).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i] == label).collect();
    if sa.is_empty() && sb.is_empty() {
        return None;
    }
    Some(2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64)
}

/// Two-sided signed-rank p by walking all 2ⁿ sign patterns.
pub fn wilcoxon_enumeration(d: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nz[a].abs().total_cmp(&nz[b].abs()));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[idx[j + 1]].abs() == nz[idx[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            ranks[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let w: f64 = (0..n).filter(|&i| nz[i] > 0.0).map(|i| ranks[i]).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w + 1e-9 {
            lo += 1;
        }
        if s >= w - 1e-9 {
            hi += 1;
        }
    }
    (w, (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0))
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, max_label: u32) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..=max_label)).collect()
}

use tileseg::volio::{Datatype, Endianness, Volume3D};

/// Random volume whose values are exactly representable in `datatype`
/// (slope 1, intercept 0, so decoding is lossless).
pub fn random_volume(rng: &mut ChaCha8Rng, datatype: Datatype, endianness: Endianness) -> Volume3D {
    let dims = [rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=9)];
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| match datatype {
            Datatype::Uint8 => rng.random_range(0..=255u32) as f32,
            Datatype::Int16 => rng.random_range(-32768..=32767i32) as f32,
            Datatype::Float32 => rng.random_range(-1e6f32..1e6),
        })
        .collect();
    let voxel = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
    Volume3D::new(dims, voxel, data)
        .unwrap()
        .with_encoding(datatype, endianness, 1.0, 0.0)
        .unwrap()
}
