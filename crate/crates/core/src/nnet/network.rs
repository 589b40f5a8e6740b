use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::conv::{backward_unfolded, forward_unfolded, unfold, ConvGeometry};
use super::loss::{dice_loss_with, one_hot, softmax_backward, softmax_channels, DiceOptions};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volio::Volume3D;

/// Hidden layers use 3×3×3 kernels with zero padding 1.
pub const KERNEL: usize = 3;
const PAD: usize = 1;

fn default_in_channels() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Conv/ReLU stack followed by a 1×1×1 head and per-voxel softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub hidden_layers: usize,
    pub num_classes: usize,
    /// Z-score each whole volume before it is tiled. The network itself
    /// consumes its input unchanged.
    #[serde(default = "default_true")]
    pub normalize_input: bool,
}

impl NetworkConfig {
    pub fn new(num_classes: usize) -> Self {
        NetworkConfig {
            in_channels: 1,
            hidden_channels: 8,
            hidden_layers: 2,
            num_classes,
            normalize_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Invalid("only single-channel input is supported".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid("num_classes must be at least 2".into()));
        }
        if self.hidden_layers < 1 || self.hidden_channels < 1 {
            return Err(Error::Invalid("need at least one hidden layer and channel".into()));
        }
        Ok(())
    }

    /// Shapes of [w1, b1, …, wL, bL, w_head, b_head].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for _ in 0..self.hidden_layers {
            shapes.push(vec![self.hidden_channels, cin, KERNEL, KERNEL, KERNEL]);
            shapes.push(vec![self.hidden_channels]);
            cin = self.hidden_channels;
        }
        shapes.push(vec![self.num_classes, cin, 1, 1, 1]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    config: NetworkConfig,
    tensors: Vec<Tensor<R>>,
    init_seed: u64,
}

impl<R: Real> ModelParams<R> {
    pub fn from_tensors(config: NetworkConfig, tensors: Vec<Tensor<R>>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::Shape("parameter tensors do not match the network config".into()));
        }
        Ok(ModelParams {
            config,
            tensors,
            init_seed,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            init_seed: self.init_seed,
        }
    }

    /// FNV-1a over parameter bit patterns; ties a forward cache to the exact
    /// weights that produced it.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn layer(&self, l: usize) -> (&Tensor<R>, &Tensor<R>) {
        (&self.tensors[2 * l], &self.tensors[2 * l + 1])
    }
}

/// Weights uniform in ±√(6/fan_in), biases zero.
pub fn init_params<R: Real>(config: &NetworkConfig, seed: u64) -> Result<ModelParams<R>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| R::from_f64(rng.random_range(-bound..bound)))
                .collect();
            Tensor::from_vec(&shape, data).expect("shape product matches")
        })
        .collect();
    ModelParams::from_tensors(config.clone(), tensors, seed)
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    dims: [usize; 3],
    /// Unfolded input of each hidden layer.
    cols: Vec<Vec<R>>,
    /// Post-ReLU output of each hidden layer.
    activations: Vec<Vec<R>>,
    probs: Vec<R>,
    fingerprint: u64,
}

impl<R: Real> ForwardCache<R> {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Post-ReLU output of each hidden layer, C×z×y×x.
    pub fn activations(&self) -> &[Vec<R>] {
        &self.activations
    }
}

/// Z-score with the population standard deviation (floored to 1 when the
/// input is constant).
pub fn zscore(data: &[f32]) -> Vec<f32> {
    let n = data.len().max(1) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    data.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
}

/// `dims` is (x, y, z); tensors are laid out C×z×y×x.
fn tensor_dims(dims: [usize; 3]) -> [usize; 3] {
    [dims[2], dims[1], dims[0]]
}

fn run_forward<R: Real>(
    data: &[f32],
    dims: [usize; 3],
    params: &ModelParams<R>,
    keep: bool,
) -> Result<(Tensor<R>, Option<ForwardCache<R>>)> {
    let n: usize = dims.iter().product();
    if data.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} voxels for dims {dims:?}", data.len())));
    }
    let cfg = params.config();
    let tdims = tensor_dims(dims);
    let mut act: Vec<R> = data.iter().map(|&v| R::from_f64(v as f64)).collect();
    let mut cin = cfg.in_channels;
    let mut cols = Vec::new();
    let mut activations = Vec::new();
    for l in 0..cfg.hidden_layers {
        let (w, b) = params.layer(l);
        let g = ConvGeometry::new(cin, cfg.hidden_channels, KERNEL, PAD, tdims)?;
        let col = unfold(&act, &g).into_owned();
        let mut out = forward_unfolded(&col, w.data(), b.data(), &g);
        for v in &mut out {
            if *v < R::zero() {
                *v = R::zero();
            }
        }
        if keep {
            cols.push(col);
            activations.push(out.clone());
        }
        act = out;
        cin = cfg.hidden_channels;
    }
    let (w, b) = params.layer(cfg.hidden_layers);
    let g = ConvGeometry::new(cin, cfg.num_classes, 1, 0, tdims)?;
    let logits = forward_unfolded(&act, w.data(), b.data(), &g);
    let logits = Tensor::from_vec(&[cfg.num_classes, tdims[0], tdims[1], tdims[2]], logits)?;
    let probs = softmax_channels(&logits)?;
    let cache = keep.then(|| ForwardCache {
        dims,
        cols,
        activations,
        probs: probs.data().to_vec(),
        fingerprint: params.fingerprint(),
    });
    Ok((probs, cache))
}

/// Class probabilities (C×z×y×x) for one tile-sized volume.
pub fn forward<R: Real>(
    volume: &Volume3D,
    params: &ModelParams<R>,
) -> Result<(Tensor<R>, ForwardCache<R>)> {
    forward_raw(volume.data(), volume.dims(), params)
}

pub fn forward_raw<R: Real>(
    data: &[f32],
    dims: [usize; 3],
    params: &ModelParams<R>,
) -> Result<(Tensor<R>, ForwardCache<R>)> {
    let (probs, cache) = run_forward(data, dims, params, true)?;
    Ok((probs, cache.expect("cache requested")))
}

/// Per-voxel argmax class (ties to the lower index), x-fastest order.
pub fn predict_classes<R: Real>(
    data: &[f32],
    dims: [usize; 3],
    params: &ModelParams<R>,
) -> Result<Vec<usize>> {
    let (probs, _) = run_forward(data, dims, params, false)?;
    Ok(argmax_channels(&probs))
}

pub fn argmax_channels<R: Real>(probs: &Tensor<R>) -> Vec<usize> {
    let c = probs.shape()[0];
    let n = probs.len() / c;
    let p = probs.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if p[ch * n + i] > p[best * n + i] {
                    best = ch;
                }
            }
            best
        })
        .collect()
}

/// Gradients for every parameter tensor, in [`NetworkConfig::param_shapes`] order.
pub fn backward<R: Real>(
    params: &ModelParams<R>,
    cache: &ForwardCache<R>,
    grad_probs: &Tensor<R>,
) -> Result<Vec<Tensor<R>>> {
    let cfg = params.config();
    if cache.fingerprint != params.fingerprint() || cache.activations.len() != cfg.hidden_layers {
        return Err(Error::Invalid("forward cache does not belong to these parameters".into()));
    }
    let tdims = tensor_dims(cache.dims);
    let expected = [cfg.num_classes, tdims[0], tdims[1], tdims[2]];
    if grad_probs.shape() != expected {
        return Err(Error::Shape(format!(
            "grad_probs shape {:?}, expected {expected:?}",
            grad_probs.shape()
        )));
    }
    let mut grads: Vec<Tensor<R>> = Vec::with_capacity(2 * (cfg.hidden_layers + 1));

    let grad_logits = softmax_backward(&cache.probs, grad_probs.data(), cfg.num_classes);
    let (wh, _) = params.layer(cfg.hidden_layers);
    let g = ConvGeometry::new(cfg.hidden_channels, cfg.num_classes, 1, 0, tdims)?;
    let last = cache.activations.last().expect("at least one hidden layer");
    let head = backward_unfolded(last, wh.data(), &grad_logits, &g, true);
    let mut head_grads = vec![
        Tensor::from_vec(wh.shape(), head.weight)?,
        Tensor::from_vec(&[cfg.num_classes], head.bias)?,
    ];
    let mut grad_act = head.input.expect("requested");

    let mut layer_grads = Vec::with_capacity(cfg.hidden_layers);
    for l in (0..cfg.hidden_layers).rev() {
        let a = &cache.activations[l];
        for (gv, &av) in grad_act.iter_mut().zip(a) {
            if av <= R::zero() {
                *gv = R::zero();
            }
        }
        let cin = if l == 0 { cfg.in_channels } else { cfg.hidden_channels };
        let g = ConvGeometry::new(cin, cfg.hidden_channels, KERNEL, PAD, tdims)?;
        let (w, _) = params.layer(l);
        let lg = backward_unfolded(&cache.cols[l], w.data(), &grad_act, &g, l > 0);
        layer_grads.push((
            Tensor::from_vec(w.shape(), lg.weight)?,
            Tensor::from_vec(&[cfg.hidden_channels], lg.bias)?,
        ));
        if let Some(gi) = lg.input {
            grad_act = gi;
        }
    }
    for (w, b) in layer_grads.into_iter().rev() {
        grads.push(w);
        grads.push(b);
    }
    grads.append(&mut head_grads);
    Ok(grads)
}

/// Loss and parameter gradients for one tile and its class targets.
pub fn loss_and_grads<R: Real>(
    params: &ModelParams<R>,
    data: &[f32],
    dims: [usize; 3],
    classes: &[usize],
    dice: DiceOptions,
) -> Result<(f64, Vec<Tensor<R>>)> {
    let (probs, cache) = forward_raw(data, dims, params)?;
    let truth = one_hot::<R>(classes, params.config().num_classes, tensor_dims(dims))?;
    let (loss, grad_probs) = dice_loss_with(&probs, &truth, dice)?;
    let grads = backward(params, &cache, &grad_probs)?;
    Ok((loss.as_f64(), grads))
}

/// One optimisation step on a single tile. Returns the pre-step loss.
pub fn train_step<R: Real>(
    params: &mut ModelParams<R>,
    state: &mut AdamState<R>,
    data: &[f32],
    dims: [usize; 3],
    classes: &[usize],
    dice: DiceOptions,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(params, data, dims, classes, dice)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    adam_step(params, &grads, state)?;
    Ok(loss)
}
