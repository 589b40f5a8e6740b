//! Per-voxel softmax over channels and the soft-Dice loss.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default additive smoothing in the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

fn split_channels(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("expected C×spatial, got {shape:?}")));
    }
    Ok((shape[0], shape[1..].iter().product()))
}

/// Softmax across axis 0 at every voxel, with max subtraction.
pub fn softmax_channels<R: Real>(logits: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, n) = split_channels(logits.shape())?;
    if c < 2 {
        return Err(Error::Shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax input contains NaN/inf".into()));
    }
    let z = logits.data();
    let mut out = vec![R::zero(); c * n];
    for i in 0..n {
        let mut max = z[i];
        for ch in 1..c {
            max = max.max(z[ch * n + i]);
        }
        let mut sum = R::zero();
        for ch in 0..c {
            let e = (z[ch * n + i] - max).exp();
            out[ch * n + i] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            out[ch * n + i] = out[ch * n + i] / sum;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Chain rule through softmax: `dz_c = p_c (dp_c − Σ_k p_k dp_k)`.
pub(crate) fn softmax_backward<R: Real>(probs: &[R], grad_probs: &[R], c: usize) -> Vec<R> {
    let n = probs.len() / c;
    let mut out = vec![R::zero(); c * n];
    for i in 0..n {
        let mut dot = R::zero();
        for ch in 0..c {
            dot = dot + probs[ch * n + i] * grad_probs[ch * n + i];
        }
        for ch in 0..c {
            out[ch * n + i] = probs[ch * n + i] * (grad_probs[ch * n + i] - dot);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceOptions {
    pub smooth: f64,
    /// Whether channel 0 takes part in the mean.
    pub include_background: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        DiceOptions {
            smooth: DICE_SMOOTH,
            include_background: false,
        }
    }
}

/// Soft-Dice loss with background (channel 0) excluded from the mean.
pub fn dice_loss<R: Real>(
    probs: &Tensor<R>,
    truth_onehot: &Tensor<R>,
    smooth: f64,
) -> Result<(R, Tensor<R>)> {
    dice_loss_with(
        probs,
        truth_onehot,
        DiceOptions {
            smooth,
            include_background: false,
        },
    )
}

/// `loss = 1 − mean_c (2Σp·g + s)/(Σp + Σg + s)` and its exact gradient.
///
/// Sums are accumulated in f64 whatever `R` is.
pub fn dice_loss_with<R: Real>(
    probs: &Tensor<R>,
    truth_onehot: &Tensor<R>,
    opts: DiceOptions,
) -> Result<(R, Tensor<R>)> {
    if probs.shape() != truth_onehot.shape() {
        return Err(Error::Shape(format!(
            "probs {:?} vs truth {:?}",
            probs.shape(),
            truth_onehot.shape()
        )));
    }
    let (c, n) = split_channels(probs.shape())?;
    let first = if opts.include_background { 0 } else { 1 };
    if first >= c {
        return Err(Error::Shape("no foreground channels to score".into()));
    }
    let counted = (c - first) as f64;
    let s = opts.smooth;
    let p = probs.data();
    let g = truth_onehot.data();

    let mut grad = vec![R::zero(); c * n];
    let mut dice_sum = 0.0;
    for ch in first..c {
        let pc = &p[ch * n..(ch + 1) * n];
        let gc = &g[ch * n..(ch + 1) * n];
        let (mut inter, mut sum_p, mut sum_g) = (0.0f64, 0.0f64, 0.0f64);
        for (&pv, &gv) in pc.iter().zip(gc) {
            let (pv, gv) = (pv.as_f64(), gv.as_f64());
            inter += pv * gv;
            sum_p += pv;
            sum_g += gv;
        }
        let num = 2.0 * inter + s;
        let den = sum_p + sum_g + s;
        dice_sum += num / den;
        // d(num/den)/dp_i = (2 g_i den − num)/den²; the loss carries −1/counted.
        let scale = -1.0 / (counted * den * den);
        for (out, &gv) in grad[ch * n..(ch + 1) * n].iter_mut().zip(gc) {
            *out = R::from_f64(scale * (2.0 * gv.as_f64() * den - num));
        }
    }
    let loss = 1.0 - dice_sum / counted;
    Ok((R::from_f64(loss), Tensor::from_vec(probs.shape(), grad)?))
}

/// One-hot encode class indices into a C×spatial tensor.
pub fn one_hot<R: Real>(classes: &[usize], num_classes: usize, spatial: [usize; 3]) -> Result<Tensor<R>> {
    let n: usize = spatial.iter().product();
    if classes.len() != n {
        return Err(Error::Shape(format!(
            "{} class indices for spatial dims {spatial:?}",
            classes.len()
        )));
    }
    let mut data = vec![R::zero(); num_classes * n];
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Invalid(format!("class {c} out of range {num_classes}")));
        }
        data[c * n + i] = R::one();
    }
    Tensor::from_vec(&[num_classes, spatial[0], spatial[1], spatial[2]], data)
}
