//! Empirical checks of the finite-shot concentration and Lipschitz bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dictconv::{generate_mixing, make_projection, reconstruct_kernel};
use crate::error::{config_err, Result};
use crate::features::{marginal_histograms, FeaturePipeline, FEATURE_MODES};
use crate::nn::Tensor;
use crate::photonic::{build_unitary, sample, InterferometerSpec, SamplerConfig};
use crate::rng;

/// `2 exp(-2 S eps^2)`.
pub fn hoeffding_bound(shots: usize, eps: f64) -> f64 {
    (2.0 * (-2.0 * shots as f64 * eps * eps).exp()).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingRow {
    pub shots: usize,
    pub eps: f64,
    pub p: f64,
    pub trials: usize,
    pub violations: usize,
    pub rate: f64,
    pub bound: f64,
    /// Three binomial standard deviations of the rate at the bound.
    pub slack: f64,
    pub holds: bool,
}

fn hoeffding_row(shots: usize, eps: f64, p: f64, trials: usize, violations: usize) -> HoeffdingRow {
    let bound = hoeffding_bound(shots, eps);
    let slack = 3.0 * (bound * (1.0 - bound) / trials as f64).sqrt();
    let rate = violations as f64 / trials as f64;
    HoeffdingRow { shots, eps, p, trials, violations, rate, bound, slack, holds: rate <= bound + slack }
}

/// Monte Carlo frequency of `|p_hat - p| >= eps` for one Bernoulli bin.
pub fn hoeffding_bin(shots: usize, eps: f64, p: f64, trials: usize, seed: u64) -> Result<HoeffdingRow> {
    if !(0.0..=1.0).contains(&p) || shots == 0 || trials == 0 {
        return Err(config_err!("invalid Hoeffding setup S={shots} p={p} trials={trials}"));
    }
    let dist = Binomial::new(shots as u64, p).map_err(|e| config_err!("{e}"))?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let violations = (0..trials)
        .filter(|_| ((dist.sample(&mut r) as f64 / shots as f64) - p).abs() >= eps)
        .count();
    Ok(hoeffding_row(shots, eps, p, trials, violations))
}

/// Per-bin Hoeffding check on the photonic marginal histograms at `theta`,
/// against the exact infinite-shot marginals. Returns the worst bin.
pub fn hoeffding_histogram(
    pipeline: &FeaturePipeline,
    theta: &[f64],
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<HoeffdingRow> {
    let exact = pipeline.source.exact_feature(theta)?;
    let u = build_unitary(&InterferometerSpec::new(theta, FEATURE_MODES)?);
    let mut counts = vec![0usize; exact.len()];
    for t in 0..trials {
        let cfg = SamplerConfig {
            input_pattern: pipeline.source.input_pattern.clone(),
            model: pipeline.source.model,
            shots: pipeline.source.shots,
            seed: rng::derive_seed(seed, "hoeffding", t as u64),
        };
        let z = marginal_histograms(&sample(&u, &cfg)?)?;
        for ((c, a), b) in counts.iter_mut().zip(&z).zip(&exact) {
            if (a - b).abs() >= eps {
                *c += 1;
            }
        }
    }
    let (worst, &v) = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
    Ok(hoeffding_row(pipeline.source.shots, eps, exact[worst], trials, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub trials: usize,
    pub max_kernel_ratio: f64,
    pub max_mixing_ratio: f64,
    pub kernel_violations: usize,
    pub mixing_violations: usize,
    /// Max observed `||dz||_2 / ||dp||_1` between feature evaluations.
    pub l_phi_surrogate: Option<f64>,
}

fn randn<R: Rng>(n: usize, r: &mut R) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Random `(A, B, z, z_hat)` draws checking
/// `||dM|| <= ||A||_2 ||dz||` and `||dW||_F <= ||A||_2 ||B||_F ||dz||`
/// with additive slack `1e-9`.
pub fn lipschitz_suite(trials: usize, seed: u64) -> Result<LipschitzReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = LipschitzReport {
        trials,
        max_kernel_ratio: 0.0,
        max_mixing_ratio: 0.0,
        kernel_violations: 0,
        mixing_violations: 0,
        l_phi_surrogate: None,
    };
    for t in 0..trials {
        let c_out = r.random_range(1..=4);
        let c_in = r.random_range(1..=4);
        let rank = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let d = r.random_range(2..=24);
        let a = make_projection(rng::derive_seed(seed, rng::PROJECTION, t as u64), c_out * c_in * rank, d)?;
        let a_norm = a.spectral_norm();
        let basis = Tensor::new(vec![rank, k, k], randn(rank * k * k, &mut r))?;
        let z = randn(d, &mut r);
        let scale = 10f64.powf(r.random_range(-3.0..1.0));
        let z_hat: Vec<f64> = z.iter().zip(randn(d, &mut r)).map(|(a, b)| a + scale * b).collect();
        let m = generate_mixing(&a, &z, c_out, c_in, rank)?;
        let m_hat = generate_mixing(&a, &z_hat, c_out, c_in, rank)?;
        let dz = l2(&diff(&z_hat, &z));
        let dm = l2(&diff(m_hat.data(), m.data()));
        let w = reconstruct_kernel(&m, &basis)?;
        let w_hat = reconstruct_kernel(&m_hat, &basis)?;
        let dw = l2(&diff(w_hat.data(), w.data()));
        let rhs_m = a_norm * dz;
        let rhs_w = a_norm * basis.l2_norm() * dz;
        if dm > rhs_m + 1e-9 {
            rep.mixing_violations += 1;
        }
        if dw > rhs_w + 1e-9 {
            rep.kernel_violations += 1;
        }
        rep.max_mixing_ratio = rep.max_mixing_ratio.max(dm / rhs_m);
        rep.max_kernel_ratio = rep.max_kernel_ratio.max(dw / rhs_w);
    }
    Ok(rep)
}

/// Empirical Lipschitz surrogate of the standardization map: max over
/// `pairs` independent evaluations at `theta` of `||dz||_2 / ||d z_tilde||_1`.
pub fn l_phi_surrogate(pipeline: &FeaturePipeline, theta: &[f64], pairs: usize, seed: u64) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in 0..pairs {
        let a = pipeline.evaluate(theta, rng::derive_seed(seed, "lphi", 2 * i as u64))?;
        let b = pipeline.evaluate(theta, rng::derive_seed(seed, "lphi", 2 * i as u64 + 1))?;
        let dp: f64 = a.raw.iter().zip(&b.raw).map(|(x, y)| (x - y).abs()).sum();
        if dp > 0.0 {
            best = best.max(l2(&diff(&a.z, &b.z)) / dp);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_value() {
        assert!((hoeffding_bound(1000, 0.1) - 2.0 * (-20.0f64).exp()).abs() < 1e-20);
        assert_eq!(hoeffding_bound(10, 0.0), 1.0);
    }

    #[test]
    fn eps_one_never_violates() {
        let row = hoeffding_bin(50, 1.0, 0.3, 1000, 1).unwrap();
        assert_eq!(row.violations, 0);
        assert!(row.holds);
    }
}
