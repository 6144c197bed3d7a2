//! Threshold-detector samplers and exact oracles for small circuits.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::interferometer::Unitary;
use super::permanent::permanent;
use crate::error::{config_err, Error, Result};

/// Largest photon number the exact indistinguishable sampler accepts.
pub const MAX_BOSON_PHOTONS: usize = 10;
/// Guards for [`exact_distribution`].
pub const MAX_EXACT_PHOTONS: usize = 6;
pub const MAX_EXACT_MODES: usize = 8;

const SAMPLE_MAGIC: &[u8; 8] = b"PQKDSMP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingModel {
    /// Photons propagate independently; column `j` of `|U|^2` is a categorical.
    #[default]
    Distinguishable,
    /// Fock-space enumeration with permanent amplitudes.
    ExactBoson,
}

impl std::str::FromStr for SamplingModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distinguishable" => Ok(Self::Distinguishable),
            "exact_boson" | "boson" => Ok(Self::ExactBoson),
            other => Err(config_err!("unknown sampling model '{other}'")),
        }
    }
}

/// One photon in every even 0-based mode (modes 1, 3, 5, ... counted from one).
pub fn default_input_pattern(n_modes: usize) -> Vec<bool> {
    (0..n_modes).map(|j| j % 2 == 0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub input_pattern: Vec<bool>,
    pub model: SamplingModel,
    pub shots: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn photons(&self) -> Vec<usize> {
        self.input_pattern
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    fn validate(&self, n_modes: usize) -> Result<()> {
        if self.input_pattern.len() != n_modes {
            return Err(config_err!(
                "input pattern has {} modes but the unitary has {n_modes}",
                self.input_pattern.len()
            ));
        }
        let n_ph = self.photons().len();
        if n_ph == 0 {
            return Err(config_err!("input pattern contains no photons"));
        }
        if self.model == SamplingModel::ExactBoson && n_ph > MAX_BOSON_PHOTONS {
            return Err(Error::Capability(format!(
                "exact boson sampling supports at most {MAX_BOSON_PHOTONS} photons, got {n_ph}"
            )));
        }
        Ok(())
    }
}

/// `S x N` click patterns stored one byte per detector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBatch {
    pub n_modes: usize,
    pub shots: usize,
    bits: Vec<u8>,
}

impl SampleBatch {
    pub fn from_bits(n_modes: usize, shots: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n_modes * shots {
            return Err(config_err!(
                "sample buffer has {} entries, expected {shots} x {n_modes}",
                bits.len()
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(config_err!("sample buffer contains non-binary entries"));
        }
        Ok(Self { n_modes, shots, bits })
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.bits[s * self.n_modes..(s + 1) * self.n_modes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks(self.n_modes)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Binary layout: 8-byte magic, little-endian `u32` shots, `u32` modes,
    /// then the bits packed MSB-first, row-major, zero-padded to a whole byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len().div_ceil(8));
        out.extend_from_slice(SAMPLE_MAGIC);
        out.extend_from_slice(&(self.shots as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_modes as u32).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                byte |= b << (7 - i);
            }
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != SAMPLE_MAGIC {
            return Err(config_err!("not a sample dump (bad magic)"));
        }
        let shots = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n_modes = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let total = shots * n_modes;
        let payload = &bytes[16..];
        if payload.len() != total.div_ceil(8) {
            return Err(config_err!(
                "sample dump payload is {} bytes, expected {}",
                payload.len(),
                total.div_ceil(8)
            ));
        }
        let bits = (0..total).map(|i| (payload[i / 8] >> (7 - i % 8)) & 1).collect();
        Self::from_bits(n_modes, shots, bits)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Pattern index with mode 0 as the most significant bit.
pub fn pattern_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

pub fn pattern_bits(index: usize, n_modes: usize) -> Vec<u8> {
    (0..n_modes).map(|j| ((index >> (n_modes - 1 - j)) & 1) as u8).collect()
}

/// Draw `shots` threshold patterns from `u` under `cfg`.
pub fn sample(u: &Unitary, cfg: &SamplerConfig) -> Result<SampleBatch> {
    let n = u.nrows();
    cfg.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bits = vec![0u8; cfg.shots * n];
    match cfg.model {
        SamplingModel::Distinguishable => {
            let cdfs: Vec<Vec<f64>> = cfg.photons().iter().map(|&j| column_cdf(u, j)).collect();
            for row in bits.chunks_mut(n) {
                for cdf in &cdfs {
                    let r: f64 = rng.random();
                    row[draw(cdf, r)] = 1;
                }
            }
        }
        SamplingModel::ExactBoson => {
            let probs = boson_threshold_table(u, &cfg.photons())?;
            let (keys, cdf) = table_cdf(&probs);
            for row in bits.chunks_mut(n) {
                let r: f64 = rng.random();
                let idx = keys[draw(&cdf, r)];
                for (j, b) in row.iter_mut().enumerate() {
                    *b = ((idx >> (n - 1 - j)) & 1) as u8;
                }
            }
        }
    }
    SampleBatch::from_bits(n, cfg.shots, bits)
}

fn column_cdf(u: &Unitary, j: usize) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (0..u.nrows())
        .map(|k| {
            acc += u[(k, j)].norm_sqr();
            acc
        })
        .collect();
    let total = *cdf.last().unwrap();
    cdf.iter_mut().for_each(|c| *c /= total);
    cdf
}

fn draw(cdf: &[f64], r: f64) -> usize {
    cdf.partition_point(|&c| c <= r).min(cdf.len() - 1)
}

fn table_cdf(probs: &[(usize, f64)]) -> (Vec<usize>, Vec<f64>) {
    let total: f64 = probs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    let mut keys = Vec::with_capacity(probs.len());
    let mut cdf = Vec::with_capacity(probs.len());
    for &(k, p) in probs {
        if p > 0.0 {
            acc += p / total;
            keys.push(k);
            cdf.push(acc);
        }
    }
    (keys, cdf)
}

/// Exact threshold-pattern probabilities for indistinguishable photons,
/// as `(pattern index, probability)` pairs sorted by index.
fn boson_threshold_table(u: &Unitary, inputs: &[usize]) -> Result<Vec<(usize, f64)>> {
    let n_modes = u.nrows();
    let n_ph = inputs.len();
    if n_ph > MAX_BOSON_PHOTONS {
        return Err(Error::Capability(format!(
            "exact boson sampling supports at most {MAX_BOSON_PHOTONS} photons, got {n_ph}"
        )));
    }
    let mut table = std::collections::BTreeMap::new();
    let mut occ = vec![0usize; n_modes];
    let mut sub = vec![Complex64::new(0.0, 0.0); n_ph * n_ph];
    let mut rows = Vec::with_capacity(n_ph);
    for_each_occupation(&mut occ, 0, n_ph, &mut |occ| {
        rows.clear();
        let mut norm = 1.0;
        for (k, &c) in occ.iter().enumerate() {
            for _ in 0..c {
                rows.push(k);
            }
            norm *= factorial(c);
        }
        for (r, &k) in rows.iter().enumerate() {
            for (c, &j) in inputs.iter().enumerate() {
                sub[r * n_ph + c] = u[(k, j)];
            }
        }
        let p = permanent(&sub, n_ph).norm_sqr() / norm;
        let idx = occ.iter().fold(0usize, |acc, &c| (acc << 1) | usize::from(c > 0));
        *table.entry(idx).or_insert(0.0) += p;
    });
    Ok(table.into_iter().collect())
}

fn for_each_occupation(occ: &mut [usize], pos: usize, left: usize, f: &mut impl FnMut(&[usize])) {
    if pos == occ.len() - 1 {
        occ[pos] = left;
        f(occ);
        occ[pos] = 0;
        return;
    }
    for c in (0..=left).rev() {
        occ[pos] = c;
        for_each_occupation(occ, pos + 1, left - c, f);
    }
    occ[pos] = 0;
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact threshold-pattern distribution for small circuits, indexed by
/// [`pattern_index`]. Distinguishable probabilities come from enumerating
/// all `N^n` photon assignments.
pub fn exact_distribution(u: &Unitary, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    let n_modes = u.nrows();
    cfg.validate(n_modes)?;
    let photons = cfg.photons();
    if photons.len() > MAX_EXACT_PHOTONS || n_modes > MAX_EXACT_MODES {
        return Err(Error::Capability(format!(
            "exact distribution limited to {MAX_EXACT_PHOTONS} photons and {MAX_EXACT_MODES} modes, got {} and {n_modes}",
            photons.len()
        )));
    }
    let mut dist = vec![0.0; 1 << n_modes];
    match cfg.model {
        SamplingModel::ExactBoson => {
            for (idx, p) in boson_threshold_table(u, &photons)? {
                dist[idx] = p;
            }
        }
        SamplingModel::Distinguishable => {
            let n_ph = photons.len();
            let mut assign = vec![0usize; n_ph];
            loop {
                let mut p = 1.0;
                let mut mask = 0usize;
                for (&j, &k) in photons.iter().zip(&assign) {
                    p *= u[(k, j)].norm_sqr();
                    mask |= 1 << (n_modes - 1 - k);
                }
                dist[mask] += p;
                let mut pos = 0;
                while pos < n_ph {
                    assign[pos] += 1;
                    if assign[pos] < n_modes {
                        break;
                    }
                    assign[pos] = 0;
                    pos += 1;
                }
                if pos == n_ph {
                    break;
                }
            }
        }
    }
    Ok(dist)
}

/// Exact distribution of the click pattern restricted to `modes`, indexed
/// MSB-first over the listed modes.
///
/// Distinguishable photons are handled by dynamic programming over photons
/// on the block's click mask plus an "outside" absorbing outcome, so this
/// scales to the 16-mode, 8-photon default. Indistinguishable photons go
/// through full Fock enumeration and obey [`MAX_BOSON_PHOTONS`].
pub fn exact_block_marginal(u: &Unitary, cfg: &SamplerConfig, modes: &[usize]) -> Result<Vec<f64>> {
    let n_modes = u.nrows();
    cfg.validate(n_modes)?;
    let m = modes.len();
    if m == 0 || m > 20 || modes.iter().any(|&k| k >= n_modes) {
        return Err(config_err!("invalid marginal block {modes:?} for {n_modes} modes"));
    }
    let mut out = vec![0.0; 1 << m];
    match cfg.model {
        SamplingModel::Distinguishable => {
            out[0] = 1.0;
            for &j in &cfg.photons() {
                let mut next = vec![0.0; 1 << m];
                let p_in: Vec<f64> = modes.iter().map(|&k| u[(k, j)].norm_sqr()).collect();
                let p_out = (1.0 - p_in.iter().sum::<f64>()).max(0.0);
                for (mask, &w) in out.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    next[mask] += w * p_out;
                    for (b, &p) in p_in.iter().enumerate() {
                        next[mask | (1 << (m - 1 - b))] += w * p;
                    }
                }
                out = next;
            }
        }
        SamplingModel::ExactBoson => {
            for (idx, p) in boson_threshold_table(u, &cfg.photons())? {
                let sub = modes
                    .iter()
                    .fold(0usize, |acc, &k| (acc << 1) | ((idx >> (n_modes - 1 - k)) & 1));
                out[sub] += p;
            }
        }
    }
    Ok(out)
}

/// Total-variation distance between the empirical pattern frequencies of
/// `batch` and a dense distribution indexed by [`pattern_index`].
pub fn tv_distance(batch: &SampleBatch, dist: &[f64]) -> f64 {
    let mut counts = vec![0.0; dist.len()];
    for row in batch.rows() {
        counts[pattern_index(row)] += 1.0;
    }
    let s = batch.shots as f64;
    0.5 * counts.iter().zip(dist).map(|(c, p)| (c / s - p).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonic::interferometer::{build_unitary, InterferometerSpec};
    use std::f64::consts::FRAC_PI_4;

    fn balanced() -> Unitary {
        build_unitary(&InterferometerSpec::new(&[FRAC_PI_4], 2).unwrap())
    }

    fn cfg(model: SamplingModel, shots: usize) -> SamplerConfig {
        SamplerConfig { input_pattern: vec![true, true], model, shots, seed: 3 }
    }

    #[test]
    fn hong_ou_mandel_dip() {
        let d = exact_distribution(&balanced(), &cfg(SamplingModel::ExactBoson, 1)).unwrap();
        assert!(d[0b11].abs() < 1e-12);
        assert!((d[0b10] - 0.5).abs() < 1e-12 && (d[0b01] - 0.5).abs() < 1e-12);
        let batch = sample(&balanced(), &cfg(SamplingModel::ExactBoson, 2000)).unwrap();
        assert!(batch.rows().all(|r| r != [1, 1]));
    }

    #[test]
    fn distinguishable_coincidences_at_half() {
        let d = exact_distribution(&balanced(), &cfg(SamplingModel::Distinguishable, 1)).unwrap();
        assert!((d[0b11] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_keeps_photons_in_place() {
        let u = Unitary::identity(6, 6);
        let c = SamplerConfig {
            input_pattern: default_input_pattern(6),
            model: SamplingModel::ExactBoson,
            shots: 50,
            seed: 1,
        };
        let batch = sample(&u, &c).unwrap();
        assert!(batch.rows().all(|r| r == [1, 0, 1, 0, 1, 0]));
    }

    #[test]
    fn photon_guard() {
        let u = Unitary::identity(12, 12);
        let c = SamplerConfig {
            input_pattern: vec![true; 11].into_iter().chain([false]).collect(),
            model: SamplingModel::ExactBoson,
            shots: 1,
            seed: 0,
        };
        assert!(matches!(sample(&u, &c), Err(Error::Capability(_))));
    }

    #[test]
    fn block_marginal_matches_full_distribution() {
        let theta: Vec<f64> = (0..14).map(|i| 0.3 + 0.17 * i as f64).collect();
        let u = build_unitary(&InterferometerSpec::new(&theta, 8).unwrap());
        for model in [SamplingModel::Distinguishable, SamplingModel::ExactBoson] {
            let c = SamplerConfig {
                input_pattern: default_input_pattern(8),
                model,
                shots: 1,
                seed: 0,
            };
            let full = exact_distribution(&u, &c).unwrap();
            let block = exact_block_marginal(&u, &c, &[4, 5, 6, 7]).unwrap();
            let mut want = vec![0.0; 16];
            for (idx, p) in full.iter().enumerate() {
                want[idx & 0xf] += p;
            }
            for (a, b) in block.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let theta = [0.4; 15];
        let u = build_unitary(&InterferometerSpec::new(&theta, 16).unwrap());
        let c = SamplerConfig {
            input_pattern: default_input_pattern(16),
            model: SamplingModel::Distinguishable,
            shots: 13,
            seed: 9,
        };
        let batch = sample(&u, &c).unwrap();
        let bytes = batch.to_bytes();
        assert_eq!(bytes.len(), 16 + (13 * 16usize).div_ceil(8));
        assert_eq!(SampleBatch::from_bytes(&bytes).unwrap(), batch);
    }

    #[test]
    fn same_seed_same_samples() {
        let u = balanced();
        let a = sample(&u, &cfg(SamplingModel::Distinguishable, 100)).unwrap();
        let b = sample(&u, &cfg(SamplingModel::Distinguishable, 100)).unwrap();
        assert_eq!(a, b);
    }
}
