use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, params: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
    }
}

/// One bias-corrected Adam update over `params`. Every parameter must carry a gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
        return Err(Error::contract(format!(
            "adam_step: parameter {i} has no gradient"
        )));
    }
    state.ensure(params);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.take().expect("checked above");
        for (((w, g), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(x).with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [scalar_param(1.0, 1.0)];
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &mut st, &cfg).unwrap();
        // m_hat = 1, v_hat = 1 at t=1
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = [scalar_param(0.75, 0.0)];
        let mut st = AdamState::new();
        adam_step(&mut p, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].item(), 0.75);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = [Tensor::scalar(1.0).with_grad()];
        let mut st = AdamState::new();
        assert!(adam_step(&mut p, &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn quadratic_converges() {
        let mut p = [Tensor::scalar(1.0).with_grad()];
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..100 {
            let x = p[0].item();
            p[0].grad = Some(vec![2.0 * x]);
            adam_step(&mut p, &mut st, &cfg).unwrap();
        }
        assert!(p[0].item().abs() < 0.05, "x = {}", p[0].item());
    }
}
