use serde::{Deserialize, Serialize};

use super::network::ModelParams;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<R>>,
    pub second_moment: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ModelParams<R>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<R>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// Adam with bias-corrected moments. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step<R: Real>(
    params: &mut ModelParams<R>,
    grads: &[Tensor<R>],
    state: &mut AdamState<R>,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len()
        || state.first_moment.len() != tensors.len()
        || grads
            .iter()
            .zip(tensors.iter())
            .zip(&state.first_moment)
            .any(|((g, t), m)| g.shape() != t.shape() || m.shape() != t.shape())
    {
        return Err(Error::Shape("gradients, moments and parameters disagree".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = R::from_f64(c.beta1);
    let b2 = R::from_f64(c.beta2);
    let one_b1 = R::from_f64(1.0 - c.beta1);
    let one_b2 = R::from_f64(1.0 - c.beta2);
    let bias1 = R::from_f64(1.0 - c.beta1.powi(t));
    let bias2 = R::from_f64(1.0 - c.beta2.powi(t));
    let lr = R::from_f64(c.lr);
    let eps = R::from_f64(c.epsilon);

    for (((param, grad), m), v) in tensors
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::network::{init_params, NetworkConfig};
    use super::*;

    fn params() -> ModelParams<f64> {
        let cfg = NetworkConfig {
            hidden_channels: 2,
            hidden_layers: 1,
            ..NetworkConfig::new(2)
        };
        init_params(&cfg, 11).unwrap()
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 0.0001);
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = params();
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let zeros: Vec<_> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &zeros, &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // m̂ = g, v̂ = g², so |Δθ| = lr·|g|/(|g| + ε).
        for g in [0.5, -3.0, 1e-3] {
            let mut p = params();
            let before = p.clone();
            let mut state = AdamState::new(&p, AdamConfig::default());
            let grads: Vec<_> = p
                .tensors()
                .iter()
                .map(|t| Tensor::from_vec(t.shape(), vec![g; t.len()]).unwrap())
                .collect();
            adam_step(&mut p, &grads, &mut state).unwrap();
            let lr = AdamConfig::default().lr;
            for (a, b) in p.tensors().iter().zip(before.tensors()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    let delta = (x - y).abs();
                    assert!(delta >= 0.99 * lr && delta <= lr * (1.0 + 1e-12), "{delta}");
                    assert_eq!((x - y).signum(), -f64::signum(g));
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = params();
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        let mut grads: Vec<_> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = f64::NAN;
        assert!(adam_step(&mut p, &grads, &mut state).is_err());
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }
}
