//! Fast invariant suite behind the `selftest` subcommand.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;

use super::bounds::{hoeffding_bin, lipschitz_suite};
use super::ema::{ema_report, iid_surrogate_trace};
use super::fit::{fit_shot_model, ShotPoint};
use crate::dictconv::{count_params, teacher_params, CompressionConfig, Scope, Widths};
use crate::error::Result;
use crate::kd::{kl_divergence, soften, spsa_update_with_delta, SpsaConfig};
use crate::photonic::{build_unitary, exact_distribution, unitarity_defect, InterferometerSpec, SamplerConfig, SamplingModel};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        check("teacher parameter count", || {
            let n = teacher_params(Widths::new(32, 64, 128));
            Ok((n == 94_474, format!("{n}")))
        }),
        check("conv1 compression factor", || {
            let r = count_params(&CompressionConfig::uniform(Scope::Conv1, 4, 30, Widths::new(32, 64, 128))?)?;
            Ok(((r.cr_overall * 100.0).round() == 101.0, format!("{:.4}", r.cr_overall)))
        }),
        check("interferometer unitarity", || {
            let mut r = rng::stream(7, "selftest", 0);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let theta: Vec<f64> = (0..30).map(|_| r.random_range(-3.2..3.2)).collect();
                worst = worst.max(unitarity_defect(&build_unitary(&InterferometerSpec::new(&theta, 16)?)));
            }
            Ok((worst <= 1e-10, format!("max defect {worst:.2e}")))
        }),
        check("two-photon interference dip", || {
            let u = build_unitary(&InterferometerSpec::new(&[FRAC_PI_4], 2)?);
            let cfg = SamplerConfig { input_pattern: vec![true, true], model: SamplingModel::ExactBoson, shots: 1, seed: 0 };
            let p = exact_distribution(&u, &cfg)?[0b11];
            Ok((p.abs() <= 1e-12, format!("coincidence {p:.2e}")))
        }),
        check("SPSA closed-form step", || {
            let step = spsa_update_with_delta(&[1.0], &[1.0], |t| Ok(t[0] * t[0]), &SpsaConfig::default())?;
            Ok(((step.theta[0] - 0.8).abs() < 1e-12, format!("theta' = {}", step.theta[0])))
        }),
        check("two-class KL", || {
            let p = soften(&[1.0, 0.0], 1.0)?;
            let q = soften(&[0.0, 1.0], 1.0)?;
            let kl = kl_divergence(&p, &q);
            Ok(((kl - 0.5f64.tanh()).abs() < 1e-12, format!("{kl:.6}")))
        }),
        check("shot-model identifiability", || {
            let pts: Vec<ShotPoint> = [75.0, 100.0, 200.0, 400.0, 800.0]
                .iter()
                .map(|&s: &f64| ShotPoint { shots: s, mean: 90.0 - 300.0 / s.sqrt(), variance: 1.0 })
                .collect();
            let f = fit_shot_model(&pts, 75.0)?;
            Ok(((f.delta_inf - 90.0).abs() < 1e-9 && (f.k - 300.0).abs() < 1e-9, format!("({}, {})", f.delta_inf, f.k)))
        }),
        check("EMA attenuation", || {
            let rep = ema_report(&iid_surrogate_trace(0.9, 64, 2000, 11)?, Some((200, 2000)))?;
            let target = 0.1 / 1.9;
            Ok(((rep.median / target - 1.0).abs() <= 0.2, format!("median {:.4} vs {target:.4}", rep.median)))
        }),
        check("Lipschitz bounds", || {
            let rep = lipschitz_suite(200, 5)?;
            Ok((
                rep.kernel_violations + rep.mixing_violations == 0,
                format!("max ratios {:.4} / {:.4}", rep.max_kernel_ratio, rep.max_mixing_ratio),
            ))
        }),
        check("Hoeffding bound", || {
            let row = hoeffding_bin(100, 0.1, 0.5, 20_000, 3)?;
            Ok((row.holds, format!("rate {:.4} bound {:.4}", row.rate, row.bound)))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
