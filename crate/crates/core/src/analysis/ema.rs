//! Variance attenuation of EMA-smoothed feature traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Result};
use crate::features::{trace_rows, EmaState, TraceRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaReport {
    pub dims: usize,
    /// Dimensions dropped because the raw trace had zero variance.
    pub excluded: usize,
    pub epochs: (usize, usize),
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Sorted `(ratio, cumulative fraction)` pairs.
    pub cdf: Vec<(f64, f64)>,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-dimension `Var(z_used) / Var(z_raw)` over epochs in `[first, last]`
/// (whole trace when `window` is None).
pub fn ema_report(rows: &[TraceRow], window: Option<(usize, usize)>) -> Result<EmaReport> {
    let rows: Vec<&TraceRow> = rows
        .iter()
        .filter(|r| window.is_none_or(|(a, b)| r.epoch >= a && r.epoch <= b))
        .collect();
    if rows.is_empty() {
        return Err(usage_err!("feature trace is empty"));
    }
    let dims = rows.iter().map(|r| r.dim).max().unwrap() + 1;
    let mut raw = vec![Vec::new(); dims];
    let mut used = vec![Vec::new(); dims];
    for r in &rows {
        raw[r.dim].push(r.z_raw);
        used[r.dim].push(r.z_used);
    }
    let mut ratios = Vec::with_capacity(dims);
    let mut excluded = 0;
    for (a, b) in raw.iter().zip(&used) {
        let vr = if a.len() > 1 { variance(a) } else { 0.0 };
        if vr > 0.0 {
            ratios.push(variance(b) / vr);
        } else {
            excluded += 1;
        }
    }
    if ratios.is_empty() {
        return Err(usage_err!("every trace dimension has zero raw variance"));
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len() as f64;
    let cdf = ratios.iter().enumerate().map(|(i, &r)| (r, (i + 1) as f64 / n)).collect();
    let epochs = (
        rows.iter().map(|r| r.epoch).min().unwrap(),
        rows.iter().map(|r| r.epoch).max().unwrap(),
    );
    Ok(EmaReport {
        dims,
        excluded,
        epochs,
        median: quantile(&ratios, 0.5),
        q1: quantile(&ratios, 0.25),
        q3: quantile(&ratios, 0.75),
        cdf,
    })
}

/// Trace of an iid unit-variance stream and its EMA, `steps` epochs long.
pub fn iid_surrogate_trace(beta: f64, dims: usize, steps: usize, seed: u64) -> Result<Vec<TraceRow>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ema = EmaState::new(beta)?;
    let mut rows = Vec::with_capacity(dims * steps);
    for epoch in 1..=steps {
        let z: Vec<f64> = (0..dims).map(|_| r.sample(StandardNormal)).collect();
        let used = ema.update(&z)?.to_vec();
        rows.extend(trace_rows(epoch, &z, &used));
    }
    Ok(rows)
}
