//! Tiled adjacent-mode beam-splitter mesh.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub type Unitary = DMatrix<Complex64>;

/// Principal interval bound for circuit angles.
pub const THETA_MAX: f64 = PI;

/// Map an angle into `[-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = x - two_pi * (x / two_pi).round();
    w.clamp(-PI, PI)
}

/// Number of `N-1`-angle tiles needed to consume `dim` parameters.
pub fn tiles_for(dim: usize, n_modes: usize) -> usize {
    dim.div_ceil(n_modes - 1).max(1)
}

/// Pad with zeros or truncate `theta` to exactly `(N-1) * n_tiling` angles.
pub fn fit_theta_to_tiles(theta: &[f64], n_modes: usize, n_tiling: usize) -> Result<Vec<f64>> {
    if n_modes < 2 {
        return Err(config_err!("interferometer needs at least 2 modes, got {n_modes}"));
    }
    if theta.is_empty() {
        return Err(config_err!("photonic parameter vector is empty"));
    }
    if n_tiling == 0 {
        return Err(config_err!("tile count must be at least 1"));
    }
    let l_eff = (n_modes - 1) * n_tiling;
    let mut fit: Vec<f64> = theta.iter().copied().take(l_eff).collect();
    fit.resize(l_eff, 0.0);
    Ok(fit)
}

/// Backend-compatible angle vector and its tile count.
pub fn fit_theta(theta: &[f64], n_modes: usize) -> Result<(Vec<f64>, usize)> {
    if n_modes < 2 {
        return Err(config_err!("interferometer needs at least 2 modes, got {n_modes}"));
    }
    if theta.is_empty() {
        return Err(config_err!("photonic parameter vector is empty"));
    }
    let n_tiling = tiles_for(theta.len(), n_modes);
    Ok((fit_theta_to_tiles(theta, n_modes, n_tiling)?, n_tiling))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferometerSpec {
    pub n_modes: usize,
    pub theta: Vec<f64>,
    /// Wrapped, tile-fitted angles actually programmed into the mesh.
    pub theta_fit: Vec<f64>,
    pub n_tiling: usize,
    /// Fixed beam-splitter phase; zero gives real rotations.
    pub bs_phase: f64,
}

impl InterferometerSpec {
    pub fn new(theta: &[f64], n_modes: usize) -> Result<Self> {
        let (fit, n_tiling) = fit_theta(theta, n_modes)?;
        Ok(Self {
            n_modes,
            theta: theta.to_vec(),
            theta_fit: fit.into_iter().map(wrap_angle).collect(),
            n_tiling,
            bs_phase: 0.0,
        })
    }

    pub fn with_phase(mut self, phi: f64) -> Self {
        self.bs_phase = phi;
        self
    }
}

/// `U = U^(n) ... U^(1)`; tile `t` applies `BS(theta, phi)` on mode pairs
/// `(j, j+1)` for `j = 0..N-1` in ascending order. `U[(k, j)]` is the
/// amplitude for input mode `j` to reach output mode `k`.
///
/// `BS(theta, phi) = [[cos, -e^{-i phi} sin], [e^{i phi} sin, cos]]`.
pub fn build_unitary(spec: &InterferometerSpec) -> Unitary {
    let n = spec.n_modes;
    let mut u = Unitary::identity(n, n);
    let e_pos = Complex64::from_polar(1.0, spec.bs_phase);
    let e_neg = e_pos.conj();
    for tile in spec.theta_fit.chunks(n - 1) {
        for (j, &angle) in tile.iter().enumerate() {
            let (s, c) = angle.sin_cos();
            for col in 0..n {
                let a = u[(j, col)];
                let b = u[(j + 1, col)];
                u[(j, col)] = a * c - e_neg * b * s;
                u[(j + 1, col)] = e_pos * a * s + b * c;
            }
        }
    }
    u
}

/// `max |(U^dagger U - I)_{ij}|`.
pub fn unitarity_defect(u: &Unitary) -> f64 {
    let n = u.nrows();
    let p = u.adjoint() * u;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p[(i, j)] - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tiling_examples() {
        let theta: Vec<f64> = (0..45).map(|i| i as f64 * 0.01).collect();
        let (fit, n) = fit_theta(&theta, 16).unwrap();
        assert_eq!(n, 3);
        assert_eq!(fit, theta);

        let (fit, n) = fit_theta(&[0.5; 15], 16).unwrap();
        assert_eq!((n, fit.len()), (1, 15));

        let theta: Vec<f64> = (1..=20).map(f64::from).collect();
        let (fit, n) = fit_theta(&theta, 16).unwrap();
        assert_eq!(n, 2);
        assert_eq!(&fit[..20], &theta[..]);
        assert_eq!(&fit[20..], &[0.0; 10]);
    }

    #[test]
    fn truncation_when_tiles_are_fixed() {
        let theta: Vec<f64> = (0..20).map(f64::from).collect();
        let fit = fit_theta_to_tiles(&theta, 16, 1).unwrap();
        assert_eq!(fit, theta[..15].to_vec());
    }

    #[test]
    fn empty_theta_is_rejected() {
        assert!(matches!(fit_theta(&[], 16), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_angles_give_identity() {
        let spec = InterferometerSpec::new(&[0.0; 30], 16).unwrap();
        let u = build_unitary(&spec);
        assert_eq!(u, Unitary::identity(16, 16));
    }

    #[test]
    fn two_mode_quarter_pi_is_balanced() {
        let spec = InterferometerSpec::new(&[std::f64::consts::FRAC_PI_4], 2).unwrap();
        let u = build_unitary(&spec);
        assert!((u[(0, 0)].norm_sqr() - 0.5).abs() < 1e-15);
        assert!((u[(0, 1)].re + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn random_meshes_are_unitary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..45).map(|_| rng.random_range(-10.0..10.0)).collect();
            let spec = InterferometerSpec::new(&theta, 16)
                .unwrap()
                .with_phase(rng.random_range(-3.0..3.0));
            assert!(unitarity_defect(&build_unitary(&spec)) <= 1e-10);
        }
    }

    #[test]
    fn wrapped_angles_stay_in_bounds() {
        for x in [-100.0, -7.0, -PI, 0.0, 3.5, PI, 1e3] {
            let w = wrap_angle(x);
            assert!((-PI..=PI).contains(&w));
            assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
