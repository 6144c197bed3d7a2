//! Shot-budget model `delta(S) = delta_inf - k / sqrt(S)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and variance of an observable at one shot budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotPoint {
    pub shots: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub delta_inf: f64,
    pub k: f64,
    pub se_delta_inf: f64,
    pub se_k: f64,
    pub r2_weighted: f64,
    pub s_min: f64,
    pub n_points: usize,
    pub s_range: (f64, f64),
}

/// Weighted linear least squares on the regressor `x = 1/sqrt(S)` with
/// weights `1/variance`, using only points with `S >= s_min` and a finite
/// positive weight. Standard errors are scaled by the reduced weighted
/// residual (zero for an exact fit).
pub fn fit_shot_model(points: &[ShotPoint], s_min: f64) -> Result<FitResult> {
    let used: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| p.shots >= s_min && p.shots > 0.0 && p.variance > 0.0 && p.variance.is_finite() && p.mean.is_finite())
        .map(|p| (1.0 / p.shots.sqrt(), p.mean, 1.0 / p.variance))
        .collect();
    if used.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 points with S >= {s_min} and positive variance, have {}",
            used.len()
        )));
    }
    let sw: f64 = used.iter().map(|u| u.2).sum();
    let xbar = used.iter().map(|u| u.2 * u.0).sum::<f64>() / sw;
    let ybar = used.iter().map(|u| u.2 * u.1).sum::<f64>() / sw;
    let sxx: f64 = used.iter().map(|u| u.2 * (u.0 - xbar).powi(2)).sum();
    let sxy: f64 = used.iter().map(|u| u.2 * (u.0 - xbar) * (u.1 - ybar)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("all usable points share one shot budget".into()));
    }
    let slope = sxy / sxx;
    let delta_inf = ybar - slope * xbar;
    let k = -slope;
    let ss_res: f64 = used.iter().map(|u| u.2 * (u.1 - (delta_inf - k * u.0)).powi(2)).sum();
    let ss_tot: f64 = used.iter().map(|u| u.2 * (u.1 - ybar).powi(2)).sum();
    let r2_weighted = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    let s2 = ss_res / (used.len() - 2) as f64;
    let se_k = (s2 / sxx).sqrt();
    let se_delta_inf = (s2 * (1.0 / sw + xbar * xbar / sxx)).sqrt();
    let shots: Vec<f64> = used.iter().map(|u| 1.0 / (u.0 * u.0)).collect();
    Ok(FitResult {
        delta_inf,
        k,
        se_delta_inf,
        se_k,
        r2_weighted,
        s_min,
        n_points: used.len(),
        s_range: (
            shots.iter().copied().fold(f64::INFINITY, f64::min),
            shots.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    })
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Fit("log-log slope needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(f: impl Fn(f64) -> f64, shots: &[f64]) -> Vec<ShotPoint> {
        shots.iter().map(|&s| ShotPoint { shots: s, mean: f(s), variance: 1.0 }).collect()
    }

    #[test]
    fn constant_data() {
        let r = fit_shot_model(&pts(|_| 42.0, &[75.0, 150.0, 300.0, 600.0]), 75.0).unwrap();
        assert!(r.k.abs() < 1e-12);
        assert!((r.delta_inf - 42.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let p = pts(|s| s, &[50.0, 100.0, 200.0]);
        assert!(matches!(fit_shot_model(&p, 75.0), Err(Error::Fit(_))));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 10.0, 100.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 0.5).abs() < 1e-12);
    }
}
