//! Simultaneous-perturbation stochastic approximation for circuit angles.

use rand::Rng;

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpsaConfig {
    pub a: f64,
    pub c: f64,
    pub theta_max: f64,
    /// Validation mini-batches per objective evaluation.
    pub val_batches: usize,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        Self { a: 0.1, c: 0.1, theta_max: std::f64::consts::PI, val_batches: 4 }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.c > 0.0 && self.theta_max > 0.0) {
            return Err(config_err!(
                "SPSA needs a, c, theta_max > 0 (got {}, {}, {})",
                self.a,
                self.c,
                self.theta_max
            ));
        }
        if self.val_batches == 0 {
            return Err(config_err!("SPSA needs at least one validation batch"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpsaStep {
    pub theta: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub j_plus: f64,
    pub j_minus: f64,
    /// The objective was non-finite and `theta` was left unchanged.
    pub skipped: bool,
}

fn clip(x: f64, m: f64) -> f64 {
    x.clamp(-m, m)
}

/// One SPSA step with a caller-supplied perturbation direction.
pub fn spsa_update_with_delta<F>(theta: &[f64], delta: &[f64], mut j: F, cfg: &SpsaConfig) -> Result<SpsaStep>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    if delta.len() != theta.len() {
        return Err(config_err!("SPSA direction has {} entries, theta has {}", delta.len(), theta.len()));
    }
    let m = cfg.theta_max;
    let plus: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| clip(t + cfg.c * d, m)).collect();
    let minus: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| clip(t - cfg.c * d, m)).collect();
    let j_plus = j(&plus)?;
    let j_minus = j(&minus)?;
    if !(j_plus.is_finite() && j_minus.is_finite()) {
        log::warn!("SPSA objective not finite (J+={j_plus}, J-={j_minus}); update skipped");
        return Ok(SpsaStep {
            theta: theta.to_vec(),
            g_hat: vec![0.0; theta.len()],
            j_plus,
            j_minus,
            skipped: true,
        });
    }
    let scale = (j_plus - j_minus) / (2.0 * cfg.c);
    let g_hat: Vec<f64> = delta.iter().map(|d| scale * d).collect();
    let next = theta.iter().zip(&g_hat).map(|(t, g)| clip(t - cfg.a * g, m)).collect();
    Ok(SpsaStep { theta: next, g_hat, j_plus, j_minus, skipped: false })
}

/// One SPSA step with a Rademacher direction drawn from `rng`.
pub fn spsa_update<F, R>(theta: &[f64], j: F, cfg: &SpsaConfig, rng: &mut R) -> Result<SpsaStep>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let delta = rademacher(theta.len(), rng);
    spsa_update_with_delta(theta, &delta, j, cfg)
}

pub fn rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}
