//! Bitstring batches to the standardized 512-dimensional conditioning vector.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};
use crate::photonic::{
    build_unitary, exact_block_marginal, sample, InterferometerSpec, SampleBatch, SamplerConfig,
    SamplingModel,
};
use crate::rng;

/// Modes the feature map is built for; each half of the register is one byte.
pub const FEATURE_MODES: usize = 16;
pub const HALF_BINS: usize = 256;
pub const FEATURE_DIM: usize = 2 * HALF_BINS;
pub const DEFAULT_EPS: f64 = 1e-6;

/// MSB-first integer code of an 8-bit half pattern.
pub fn index8(half: &[u8]) -> Result<usize> {
    if half.len() != 8 {
        return Err(usage_err!("index8 needs 8 bits, got {}", half.len()));
    }
    if half.iter().any(|&b| b > 1) {
        return Err(usage_err!("index8 input is not binary: {half:?}"));
    }
    Ok(half.iter().fold(0, |acc, &b| (acc << 1) | b as usize))
}

/// Concatenated normalized histograms of the two 8-mode halves.
pub fn marginal_histograms(batch: &SampleBatch) -> Result<Vec<f64>> {
    if batch.n_modes != FEATURE_MODES {
        return Err(config_err!(
            "feature map is fixed to {FEATURE_MODES} modes, batch has {}",
            batch.n_modes
        ));
    }
    if batch.shots == 0 {
        return Err(usage_err!("cannot histogram an empty sample batch"));
    }
    let mut z = vec![0.0; FEATURE_DIM];
    for row in batch.rows() {
        z[index8(&row[..8])?] += 1.0;
        z[HALF_BINS + index8(&row[8..])?] += 1.0;
    }
    let inv = 1.0 / batch.shots as f64;
    z.iter_mut().for_each(|v| *v *= inv);
    Ok(z)
}

/// Elementwise mean and population standard deviation (two-pass).
pub fn fit_stats(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(usage_err!("fit_stats needs at least 2 samples, got {}", samples.len()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(config_err!("fit_stats samples have inconsistent lengths"));
    }
    let n = samples.len() as f64;
    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mu) {
            *acc += (v - m) * (v - m);
        }
    }
    Ok((mu, var.into_iter().map(|v| (v / n).sqrt()).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
    pub gamma: f64,
}

impl FeatureStandardizer {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, eps: f64, gamma: f64) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(config_err!(
                "standardizer mean has {} entries but sigma has {}",
                mu.len(),
                sigma.len()
            ));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(config_err!("standardizer sigma must be finite and nonnegative"));
        }
        if !(eps >= 0.0 && gamma.is_finite()) {
            return Err(config_err!("invalid standardizer eps={eps} gamma={gamma}"));
        }
        Ok(Self { mu, sigma, eps, gamma })
    }

    pub fn fit(samples: &[Vec<f64>], eps: f64, gamma: f64) -> Result<Self> {
        let (mu, sigma) = fit_stats(samples)?;
        Self::new(mu, sigma, eps, gamma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `gamma * (z_tilde - mu) / (sigma + eps)`. Bins that never varied while
    /// fitting (`sigma == 0`) are centred but not rescaled.
    pub fn standardize(&self, z_tilde: &[f64]) -> Result<Vec<f64>> {
        if z_tilde.len() != self.dim() {
            return Err(config_err!(
                "feature has {} entries, standardizer expects {}",
                z_tilde.len(),
                self.dim()
            ));
        }
        Ok(z_tilde
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((z, m), s)| {
                let denom = if *s == 0.0 { 1.0 } else { s + self.eps };
                self.gamma * (z - m) / denom
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub beta: f64,
    pub zbar: Option<Vec<f64>>,
}

impl EmaState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(config_err!("EMA beta must lie in [0, 1), got {beta}"));
        }
        Ok(Self { beta, zbar: None })
    }

    /// First call stores `z`; later calls apply `zbar = beta*zbar + (1-beta)*z`.
    pub fn update(&mut self, z: &[f64]) -> Result<&[f64]> {
        match &mut self.zbar {
            None => self.zbar = Some(z.to_vec()),
            Some(zbar) => {
                if zbar.len() != z.len() {
                    return Err(config_err!(
                        "EMA holds {} entries, update has {}",
                        zbar.len(),
                        z.len()
                    ));
                }
                for (a, b) in zbar.iter_mut().zip(z) {
                    *a = self.beta * *a + (1.0 - self.beta) * b;
                }
            }
        }
        Ok(self.zbar.as_deref().unwrap())
    }

    /// Steady-state variance ratio `(1-beta)/(1+beta)` for iid inputs.
    pub fn variance_ratio(&self) -> f64 {
        (1.0 - self.beta) / (1.0 + self.beta)
    }

    /// Shot budget an unsmoothed feature would need for the same variance.
    pub fn effective_shots(&self, shots: f64) -> f64 {
        shots / self.variance_ratio()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseConfig {
    pub sigma_z: f64,
    pub sigma_theta: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_z >= 0.0 && self.sigma_theta >= 0.0) {
            return Err(config_err!(
                "noise stds must be nonnegative (sigma_z={}, sigma_theta={})",
                self.sigma_z,
                self.sigma_theta
            ));
        }
        Ok(())
    }
}

fn gaussian_perturb<R: Rng>(x: &[f64], sigma: f64, what: &str, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(config_err!("{what} std must be nonnegative, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// `z + eta`, `eta ~ N(0, sigma_z^2 I)`.
pub fn corrupt_feature<R: Rng>(z: &[f64], sigma_z: f64, rng: &mut R) -> Result<Vec<f64>> {
    gaussian_perturb(z, sigma_z, "feature corruption", rng)
}

/// `clip(theta + xi, -theta_max, theta_max)`, `xi ~ N(0, sigma_theta^2 I)`.
pub fn drift_theta<R: Rng>(
    theta: &[f64],
    sigma_theta: f64,
    theta_max: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = gaussian_perturb(theta, sigma_theta, "parameter drift", rng)?;
    out.iter_mut().for_each(|t| *t = t.clamp(-theta_max, theta_max));
    Ok(out)
}

/// Source settings shared by every feature evaluation of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSettings {
    pub input_pattern: Vec<bool>,
    pub model: SamplingModel,
    pub shots: usize,
}

impl SourceSettings {
    pub fn new(model: SamplingModel, shots: usize) -> Self {
        Self {
            input_pattern: crate::photonic::default_input_pattern(FEATURE_MODES),
            model,
            shots,
        }
    }

    /// Shot-limited histogram feature `z_tilde(theta)` from one sampler run.
    pub fn raw_feature(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        if self.shots == 0 {
            return Err(config_err!("shot budget must be at least 1"));
        }
        let u = build_unitary(&InterferometerSpec::new(theta, FEATURE_MODES)?);
        let cfg = SamplerConfig {
            input_pattern: self.input_pattern.clone(),
            model: self.model,
            shots: self.shots,
            seed,
        };
        marginal_histograms(&sample(&u, &cfg)?)
    }

    /// Infinite-shot limit of [`Self::raw_feature`] from exact half marginals.
    pub fn exact_feature(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let u = build_unitary(&InterferometerSpec::new(theta, FEATURE_MODES)?);
        let cfg = SamplerConfig {
            input_pattern: self.input_pattern.clone(),
            model: self.model,
            shots: 1,
            seed: 0,
        };
        let lo: Vec<usize> = (0..8).collect();
        let hi: Vec<usize> = (8..16).collect();
        let mut z = exact_block_marginal(&u, &cfg, &lo)?;
        z.extend(exact_block_marginal(&u, &cfg, &hi)?);
        Ok(z)
    }
}

/// One feature evaluation: raw histogram and its standardized image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEval {
    pub raw: Vec<f64>,
    pub z: Vec<f64>,
}

/// Sampler settings plus frozen standardization; optional feature corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub source: SourceSettings,
    pub standardizer: FeatureStandardizer,
    pub sigma_z: f64,
}

impl FeaturePipeline {
    /// Fit standardization from one evaluation per probe angle vector;
    /// probe `i` uses sampler seed `derive_seed(seed, "stats", i)`.
    pub fn fit(
        source: SourceSettings,
        probes: &[Vec<f64>],
        seed: u64,
        eps: f64,
        gamma: f64,
    ) -> Result<Self> {
        let samples = probes
            .iter()
            .enumerate()
            .map(|(i, theta)| source.raw_feature(theta, rng::derive_seed(seed, "stats", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source,
            standardizer: FeatureStandardizer::fit(&samples, eps, gamma)?,
            sigma_z: 0.0,
        })
    }

    pub fn with_corruption(mut self, sigma_z: f64) -> Result<Self> {
        if !(sigma_z >= 0.0) {
            return Err(config_err!("feature corruption std must be nonnegative, got {sigma_z}"));
        }
        self.sigma_z = sigma_z;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.standardizer.gamma = gamma;
        self
    }

    /// Sample, histogram, standardize and (if configured) corrupt.
    pub fn evaluate(&self, theta: &[f64], seed: u64) -> Result<FeatureEval> {
        let raw = self.source.raw_feature(theta, seed)?;
        let mut z = self.standardizer.standardize(&raw)?;
        if self.sigma_z > 0.0 {
            let mut r = rng::stream(seed, rng::NOISE, 0);
            z = corrupt_feature(&z, self.sigma_z, &mut r)?;
        }
        Ok(FeatureEval { raw, z })
    }
}

/// One row per (epoch, feature index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub dim: usize,
    pub z_raw: f64,
    pub z_used: f64,
}

pub const TRACE_HEADER: [&str; 4] = ["epoch", "dim", "z_raw", "z_used"];

/// Append the trace rows of one epoch.
pub fn trace_rows(epoch: usize, z_raw: &[f64], z_used: &[f64]) -> Vec<TraceRow> {
    z_raw
        .iter()
        .zip(z_used)
        .enumerate()
        .map(|(dim, (&r, &u))| TraceRow { epoch, dim, z_raw: r, z_used: u })
        .collect()
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset: 0,
            message: format!("trace header must be {TRACE_HEADER:?}, found {headers:?}"),
        });
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    Error::Format {
        file: path.to_path_buf(),
        offset,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn index8_examples() {
        assert_eq!(index8(&[0; 8]).unwrap(), 0);
        assert_eq!(index8(&[1, 0, 0, 0, 0, 0, 0, 0]).unwrap(), 128);
        assert_eq!(index8(&[1; 8]).unwrap(), 255);
        assert!(matches!(index8(&[1; 7]), Err(Error::Usage(_))));
    }

    #[test]
    fn histogram_hand_count() {
        let mut bits = vec![0u8; 32];
        bits[16] = 1;
        let batch = SampleBatch::from_bits(16, 2, bits).unwrap();
        let z = marginal_histograms(&batch).unwrap();
        assert_eq!(z[0], 0.5);
        assert_eq!(z[128], 0.5);
        assert_eq!(z[256], 1.0);
        assert_eq!(z.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn histogram_rejects_other_widths() {
        let batch = SampleBatch::from_bits(8, 1, vec![0; 8]).unwrap();
        assert!(matches!(marginal_histograms(&batch), Err(Error::Config(_))));
    }

    #[test]
    fn default_source_at_zero_angles_is_deterministic() {
        let src = SourceSettings::new(SamplingModel::Distinguishable, 50);
        let z = src.raw_feature(&[0.0; 30], 4).unwrap();
        assert_eq!(z[0b1010_1010], 1.0);
        assert_eq!(z[256 + 0b1010_1010], 1.0);
        assert_eq!(src.exact_feature(&[0.0; 30]).unwrap(), z);
    }

    #[test]
    fn stats_examples() {
        assert!(matches!(fit_stats(&[vec![1.0]]), Err(Error::Usage(_))));
        let (mu, sigma) = fit_stats(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(mu, vec![2.0, 2.0]);
        assert_eq!(sigma, vec![1.0, 0.0]);
    }

    #[test]
    fn standardize_examples() {
        let st = FeatureStandardizer::new(vec![1.0], vec![1.0], 0.0, 2.0).unwrap();
        assert_eq!(st.standardize(&[3.0]).unwrap(), vec![4.0]);
        assert_eq!(st.standardize(&[1.0]).unwrap(), vec![0.0]);
        let off = FeatureStandardizer::new(vec![1.0], vec![1.0], 1e-6, 0.0).unwrap();
        assert_eq!(off.standardize(&[5.0]).unwrap(), vec![0.0]);
        let flat = FeatureStandardizer::new(vec![0.5], vec![0.0], 1e-6, 1.0).unwrap();
        assert_eq!(flat.standardize(&[0.75]).unwrap(), vec![0.25]);
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaState::new(0.9).unwrap();
        assert_eq!(e.update(&[2.0]).unwrap(), &[2.0]);
        assert_eq!(e.update(&[2.0]).unwrap(), &[2.0]);
        assert!((e.update(&[12.0]).unwrap()[0] - 3.0).abs() < 1e-12);
        let mut e0 = EmaState::new(0.0).unwrap();
        e0.update(&[1.0]).unwrap();
        assert_eq!(e0.update(&[7.0]).unwrap(), &[7.0]);
        assert!((e.variance_ratio() - 1.0 / 19.0).abs() < 1e-15);
        assert!((e.effective_shots(200.0) - 3800.0).abs() < 1e-9);
        assert!(EmaState::new(1.0).is_err());
    }

    #[test]
    fn noise_identity_and_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_feature(&[1.0, 2.0], 0.0, &mut r).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(corrupt_feature(&[1.0], -0.1, &mut r), Err(Error::Config(_))));
        let d = drift_theta(&[3.1, -3.1], 5.0, std::f64::consts::PI, &mut r).unwrap();
        assert!(d.iter().all(|t| t.abs() <= std::f64::consts::PI));
    }

    #[test]
    fn corruption_std_monte_carlo() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let z = corrupt_feature(&vec![0.0; n], 0.3, &mut r).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std / 0.3 - 1.0).abs() < 0.05);
        assert!(mean.abs() < 3.0 * 0.3 / (n as f64).sqrt());
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        let rows = trace_rows(3, &[0.1, 0.2], &[0.3, 0.4]);
        write_trace(&p, &rows).unwrap();
        assert_eq!(read_trace(&p).unwrap(), rows);
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_trace(&p), Err(Error::Format { .. })));
    }
}
