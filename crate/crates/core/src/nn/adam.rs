use serde::{Deserialize, Serialize};

use super::param::ParamSet;
use crate::error::{config_err, usage_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Moment buffers and step counter for [`adam_step`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        if config.lr <= 0.0 || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(config_err!("invalid Adam hyperparameters {:?}", config));
        }
        let zeros = |_| params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            first: zeros(()),
            second: zeros(()),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter in `params`.
///
/// Every parameter must carry a gradient buffer; the error names the first
/// that does not.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(usage_err!(
            "optimizer state tracks {} parameters, set has {}",
            state.first.len(),
            params.len()
        ));
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(usage_err!("parameter '{name}' has no gradient"));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((_, p), m), v) in params
        .iter_mut()
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let (data, grad) = p.data_and_grad_mut();
        let grad = grad.expect("checked above");
        for (((x, &g), mi), vi) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::full(&[1], v));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = one_param(1.25);
        let mut st = AdamState::new(&ps, AdamConfig::default()).unwrap();
        for _ in 0..5 {
            ps.zero_grad();
            ps.get_mut(crate::nn::ParamId(0)).grad_mut();
            adam_step(&mut ps, &mut st).unwrap();
        }
        assert_eq!(ps.get(crate::nn::ParamId(0)).data()[0], 1.25);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_matches_scalar_hand_trace() {
        // m1 = 0.1 g, v1 = 0.001 g^2; mhat = g, vhat = g^2
        // update = -lr * g / (|g| + eps)
        let g = 0.3;
        let mut ps = one_param(2.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&ps, cfg).unwrap();
        ps.get_mut(crate::nn::ParamId(0)).grad_mut()[0] = g;
        adam_step(&mut ps, &mut st).unwrap();
        let want = 2.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((ps.get(crate::nn::ParamId(0)).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn second_step_matches_hand_trace() {
        let (g1, g2) = (0.3, -0.1);
        let cfg = AdamConfig::default();
        let mut ps = one_param(0.0);
        let mut st = AdamState::new(&ps, cfg).unwrap();
        let id = crate::nn::ParamId(0);
        ps.get_mut(id).grad_mut()[0] = g1;
        adam_step(&mut ps, &mut st).unwrap();
        ps.get_mut(id).grad_mut()[0] = g2;
        adam_step(&mut ps, &mut st).unwrap();
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let x1 = -cfg.lr * g1 / (g1.abs() + cfg.eps);
        let x2 = x1 - cfg.lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + cfg.eps);
        assert!((ps.get(id).data()[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = one_param(1.0);
        ps.add("bias", Tensor::zeros(&[2]));
        ps.get_mut(crate::nn::ParamId(0)).grad_mut();
        let mut st = AdamState::new(&ps, AdamConfig::default()).unwrap();
        let err = adam_step(&mut ps, &mut st).unwrap_err();
        assert!(err.to_string().contains("bias"));
    }

    #[test]
    fn quadratic_norm_decreases_monotonically_after_warmup() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::full(&[8], 1.0));
        let mut st = AdamState::new(&ps, AdamConfig::default()).unwrap();
        let mut norms = Vec::new();
        for _ in 0..200 {
            ps.zero_grad();
            let w = ps.get(id).data().to_vec();
            ps.get_mut(id)
                .grad_mut()
                .iter_mut()
                .zip(&w)
                .for_each(|(g, x)| *g = 2.0 * x);
            adam_step(&mut ps, &mut st).unwrap();
            norms.push(ps.get(id).l2_norm());
        }
        for pair in norms[5..].windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert!(norms[199] < norms[0]);
    }
}
