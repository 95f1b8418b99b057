//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(shape: [usize; 2], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Tensor::zeros(shape[0], shape[1]),
            v: Tensor::zeros(shape[0], shape[1]),
        }
    }
}

/// One Adam update of `param` in place.
///
/// Weight decay is applied first as `param ← param − lr·wd·param`, then the
/// bias-corrected moment update.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::dim(format!(
            "adam step on param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        if weight_decay != 0.0 {
            p[i] *= decay;
        }
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        Self {
            states: params.into_iter().map(|p| AdamState::new(p.shape(), config)).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let mut count = 0;
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s)?;
            count += 1;
        }
        if count != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {count} params and {} grads",
                self.states.len(),
                grads.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Tensor::row_vector(&[1.0, -3.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(p.shape(), cfg(0.01, 0.0));
        adam_step(&mut p, &Tensor::zeros(1, 2), &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_scales_parameters() {
        let mut p = Tensor::row_vector(&[1.0, -3.0]).unwrap();
        let mut s = AdamState::new(p.shape(), cfg(0.01, 0.1));
        adam_step(&mut p, &Tensor::zeros(1, 2), &mut s).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
        assert!((p.data()[1] + 3.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::row_vector(&[0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::row_vector(&[0.3, -250.0, 1e-2]).unwrap();
        let mut s = AdamState::new(p.shape(), cfg(0.05, 0.0));
        adam_step(&mut p, &g, &mut s).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            assert!((pv + 0.05 * gv.signum()).abs() < 1e-6, "{pv} for grad {gv}");
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(1, 2);
        let mut s = AdamState::new([1, 2], AdamConfig::default());
        assert!(matches!(
            adam_step(&mut p, &Tensor::zeros(2, 1), &mut s),
            Err(Error::Dimension(_))
        ));
    }
}
