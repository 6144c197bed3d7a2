//! Subcommand pipelines writing run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bounds::{hoeffding_bin, hoeffding_histogram, l_phi_surrogate, lipschitz_suite, HoeffdingRow, LipschitzReport};
use super::config::RunConfig;
use super::ema::{ema_report, EmaReport};
use super::fit::FitResult;
use super::manifest::Manifest;
use super::studies::{
    fit_delta, frontier_sweep, load_splits, noise_study, par_map, read_table, shot_study, teacher_for, write_table,
    FrontierRow, NoisePoint, NoiseRow, ShotRow, FRONTIER_HEADER, NOISE_CURVE_HEADER, NOISE_HEADER, SHOT_HEADER,
};
use crate::dictconv::{count_params, ParamReport};
use crate::error::{usage_err, Error, Result};
use crate::features::{read_trace, write_trace, FeaturePipeline};
use crate::kd::{pqkd_train, train_teacher, write_metrics, Checkpoint, METRICS_HEADER};
use crate::model::Cnn;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "feature_trace.csv";
pub const TEACHER_FILE: &str = "teacher.json";
pub const TEACHER_METRICS_FILE: &str = "teacher_metrics.csv";
pub const STUDENT_FILE: &str = "student.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a command wrote, plus one-line results for the console.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub dirs: Vec<PathBuf>,
    pub lines: Vec<String>,
}

impl Outcome {
    fn merge(parts: Vec<Outcome>) -> Self {
        parts.into_iter().fold(Self::default(), |mut acc, p| {
            acc.dirs.extend(p.dirs);
            acc.lines.extend(p.lines);
            acc
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Per-seed view of a configuration: its own output directory (a
/// `seed-<n>` subdirectory when several seeds are listed) and seed list.
pub fn seed_config(cfg: &RunConfig, seed: u64) -> RunConfig {
    let out = if cfg.seeds.len() > 1 { cfg.out.join(format!("seed-{seed}")) } else { cfg.out.clone() };
    RunConfig { seeds: vec![seed], out, ..cfg.clone() }
}

fn finish(command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<()> {
    Manifest::new(command, cfg, outputs.iter().map(|s| s.to_string()).collect())?.write(&cfg.out)?;
    Ok(())
}

pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let parts = par_map(&cfg.seeds, |&seed| {
        let sc = seed_config(cfg, seed);
        create_dir(&sc.out)?;
        let data = load_splits(&sc, seed)?;
        let run = train_teacher(&data.train, &data.val, sc.widths, &sc.train(), seed)?;
        Checkpoint::teacher(&run, seed).save(&sc.out.join(TEACHER_FILE))?;
        write_metrics(&sc.out.join(TEACHER_METRICS_FILE), &run.metrics)?;
        finish("train-teacher", &sc, &[TEACHER_FILE, TEACHER_METRICS_FILE])?;
        Ok(Outcome {
            dirs: vec![sc.out.clone()],
            lines: vec![format!(
                "seed {seed}: teacher best val acc {:.4} at epoch {} -> {}",
                run.best_val_accuracy,
                run.best_epoch,
                sc.out.display()
            )],
        })
    })?;
    Ok(Outcome::merge(parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub teacher_val_accuracy: f64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub photonic_delta: f64,
    pub spsa_evals: usize,
    pub j_history: Vec<f64>,
    pub theta: Vec<f64>,
    pub accounting: ParamReport,
}

pub fn train_pqkd_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let parts = par_map(&cfg.seeds, |&seed| {
        let sc = seed_config(cfg, seed);
        create_dir(&sc.out)?;
        let data = load_splits(&sc, seed)?;
        let mut outputs = vec![METRICS_FILE, TRACE_FILE, STUDENT_FILE, SUMMARY_FILE];
        let (teacher, teacher_acc): (Cnn, f64) = if sc.teacher.is_some() {
            teacher_for(&sc, sc.widths, seed, &data)?
        } else {
            let run = train_teacher(&data.train, &data.val, sc.widths, &sc.train(), seed)?;
            Checkpoint::teacher(&run, seed).save(&sc.out.join(TEACHER_FILE))?;
            write_metrics(&sc.out.join(TEACHER_METRICS_FILE), &run.metrics)?;
            outputs.extend([TEACHER_FILE, TEACHER_METRICS_FILE]);
            (run.net, run.best_val_accuracy)
        };
        let pcfg = sc.pqkd(seed)?;
        let run = pqkd_train(&data.train, &data.val, Some(&data.test), &teacher, &pcfg)?;
        write_metrics(&sc.out.join(METRICS_FILE), &run.metrics)?;
        write_trace(&sc.out.join(TRACE_FILE), &run.trace)?;
        Checkpoint::student(&run, seed).save(&sc.out.join(STUDENT_FILE))?;
        let summary = RunSummary {
            seed,
            teacher_val_accuracy: teacher_acc,
            best_epoch: run.best_epoch,
            best_val_accuracy: run.best_val_accuracy,
            test_accuracy: run.test_accuracy,
            photonic_delta: run.photonic_delta,
            spsa_evals: run.spsa_evals,
            j_history: run.j_history.clone(),
            theta: run.theta.clone(),
            accounting: count_params(&pcfg.compression)?,
        };
        write_json(&sc.out.join(SUMMARY_FILE), &summary)?;
        finish("train-pqkd", &sc, &outputs)?;
        Ok(Outcome {
            dirs: vec![sc.out.clone()],
            lines: vec![format!(
                "seed {seed}: teacher val {:.4}, student best val {:.4} (epoch {}), test {}, C_x {:.2} -> {}",
                teacher_acc,
                run.best_val_accuracy,
                run.best_epoch,
                run.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                summary.accounting.cr_overall,
                sc.out.display()
            )],
        })
    })?;
    Ok(Outcome::merge(parts))
}

pub const FRONTIER_FILE: &str = "frontier.csv";
pub const NOISE_STUDY_FILE: &str = "noise_study.csv";
pub const SHOT_STUDY_FILE: &str = "shot_study.csv";
pub const NOISE_CURVE_FILE: &str = "noise_curve.csv";
pub const SHOT_FIT_FILE: &str = "shot_fit.json";

pub fn sweep_cmd(cfg: &RunConfig) -> Result<Outcome> {
    create_dir(&cfg.out)?;
    let rows = frontier_sweep(cfg, true)?;
    write_table(&cfg.out.join(FRONTIER_FILE), &FRONTIER_HEADER, &rows)?;
    finish("sweep", cfg, &[FRONTIER_FILE])?;
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "({},{},{}) {} R={} dim={}: C_x {:.2}, drop {:.2} +- {:.2}",
                r.c1, r.c2, r.c3, r.scope.label(), r.rank, r.dim_theta, r.cx, r.drop_mean, r.drop_sd
            )
        })
        .collect();
    Ok(Outcome { dirs: vec![cfg.out.clone()], lines })
}

pub fn noise_study_cmd(cfg: &RunConfig) -> Result<Outcome> {
    create_dir(&cfg.out)?;
    let rows = noise_study(cfg)?;
    write_table(&cfg.out.join(NOISE_STUDY_FILE), &NOISE_HEADER, &rows)?;
    finish("noise-study", cfg, &[NOISE_STUDY_FILE])?;
    let lines = rows
        .iter()
        .map(|r| format!("{} = {}: test acc {:.2} +- {:.2}", r.kind, r.sigma, r.acc_mean, r.acc_sd))
        .collect();
    Ok(Outcome { dirs: vec![cfg.out.clone()], lines })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotFits {
    pub s_min: f64,
    pub noise_slope: f64,
    pub ema_on: Option<FitResult>,
    pub ema_off: Option<FitResult>,
}

pub fn shot_study_cmd(cfg: &RunConfig) -> Result<Outcome> {
    create_dir(&cfg.out)?;
    let study = shot_study(cfg)?;
    write_table(&cfg.out.join(SHOT_STUDY_FILE), &SHOT_HEADER, &study.rows)?;
    write_table(&cfg.out.join(NOISE_CURVE_FILE), &NOISE_CURVE_HEADER, &study.noise_curve)?;
    let fits = ShotFits { s_min: cfg.s_min, noise_slope: study.noise_slope, ema_on: study.fit_ema, ema_off: study.fit_raw };
    write_json(&cfg.out.join(SHOT_FIT_FILE), &fits)?;
    finish("shot-study", cfg, &[SHOT_STUDY_FILE, NOISE_CURVE_FILE, SHOT_FIT_FILE])?;
    let mut lines: Vec<String> = study
        .rows
        .iter()
        .map(|r| {
            format!(
                "S={}: |z-z_inf| {:.4}, delta EMA on {:.2} +- {:.2}, off {:.2} +- {:.2}",
                r.shots, r.feature_error, r.delta_ema_mean, r.delta_ema_sd, r.delta_raw_mean, r.delta_raw_sd
            )
        })
        .collect();
    lines.push(format!("feature-noise log-log slope {:.3}", fits.noise_slope));
    for (label, f) in [("on", &fits.ema_on), ("off", &fits.ema_off)] {
        lines.push(match f {
            Some(f) => format!(
                "EMA {label}: delta_inf {:.2} +- {:.2}, k {:.2} +- {:.2}, R2_w {:.3}",
                f.delta_inf, f.se_delta_inf, f.k, f.se_k, f.r2_weighted
            ),
            None => format!("EMA {label}: fit skipped (fewer than 3 usable points)"),
        });
    }
    Ok(Outcome { dirs: vec![cfg.out.clone()], lines })
}

pub const EMA_REPORT_FILE: &str = "ema_report.json";
pub const EMA_CDF_FILE: &str = "ema_cdf.csv";
pub const ACCOUNTING_FILE: &str = "accounting.json";
pub const BOUNDS_FILE: &str = "bounds.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub lipschitz: LipschitzReport,
    pub hoeffding_bin: HoeffdingRow,
    /// Worst histogram bin at the run's final angles.
    pub hoeffding_histogram: Option<HoeffdingRow>,
}

#[derive(Serialize, Deserialize)]
struct CdfRow {
    ratio: f64,
    fraction: f64,
}

/// Post-hoc analysis of an existing run directory: accounting, bound
/// suite, EMA variance ratios from the feature trace, and the shot-model
/// fit when the directory holds a shot study.
pub fn report_cmd(dir: &Path) -> Result<Outcome> {
    if !dir.is_dir() {
        return Err(usage_err!("run directory {} does not exist", dir.display()));
    }
    let manifest = Manifest::read(dir)?;
    let cfg = manifest.run_config()?;
    let seed = cfg.seeds[0];
    let mut lines = Vec::new();
    let mut outputs = Vec::new();

    let accounting = count_params(&cfg.compression()?)?;
    write_json(&dir.join(ACCOUNTING_FILE), &accounting)?;
    outputs.push(ACCOUNTING_FILE);
    lines.push(format!(
        "accounting: teacher {} student {} C_x {:.2} (conv {:.2})",
        accounting.teacher_total, accounting.student_total, accounting.cr_overall, accounting.cr_conv
    ));

    let trace_path = dir.join(TRACE_FILE);
    if trace_path.is_file() {
        let rows = read_trace(&trace_path)?;
        match ema_report(&rows, cfg.ema_window) {
            Ok(rep) => {
                write_ema(dir, &rep)?;
                outputs.extend([EMA_REPORT_FILE, EMA_CDF_FILE]);
                lines.push(format!(
                    "EMA variance ratio: median {:.4} (IQR {:.4}-{:.4}) over {} dims, {} excluded",
                    rep.median, rep.q1, rep.q3, rep.dims, rep.excluded
                ));
            }
            Err(e) => lines.push(format!("EMA report skipped: {e}")),
        }
    }

    let lipschitz = lipschitz_suite(cfg.bound_trials, seed)?;
    let mut bounds = BoundsReport {
        lipschitz,
        hoeffding_bin: hoeffding_bin(1000, 0.1, 0.5, cfg.hoeffding_trials, seed)?,
        hoeffding_histogram: None,
    };
    let student_path = dir.join(STUDENT_FILE);
    if student_path.is_file() {
        let ck = Checkpoint::load(&student_path)?;
        if let Some(standardizer) = ck.standardizer {
            let pcfg = cfg.pqkd(seed)?;
            let pipeline = FeaturePipeline { source: pcfg.source, standardizer, sigma_z: 0.0 };
            bounds.hoeffding_histogram = Some(hoeffding_histogram(&pipeline, &ck.theta, 0.1, cfg.bound_trials, seed)?);
            bounds.lipschitz.l_phi_surrogate = Some(l_phi_surrogate(&pipeline, &ck.theta, 32, seed)?);
        }
    }
    write_json(&dir.join(BOUNDS_FILE), &bounds)?;
    outputs.push(BOUNDS_FILE);
    let l = &bounds.lipschitz;
    lines.push(format!(
        "Lipschitz suite: {} trials, max ratios kernel {:.6} mixing {:.6}, violations {}/{}",
        l.trials, l.max_kernel_ratio, l.max_mixing_ratio, l.kernel_violations, l.mixing_violations
    ));
    for h in std::iter::once(&bounds.hoeffding_bin).chain(&bounds.hoeffding_histogram) {
        lines.push(format!(
            "Hoeffding S={} eps={}: rate {:.3e} <= bound {:.3e} + {:.3e}: {}",
            h.shots,
            h.eps,
            h.rate,
            h.bound,
            h.slack,
            if h.holds { "ok" } else { "VIOLATED" }
        ));
    }

    let shot_path = dir.join(SHOT_STUDY_FILE);
    if shot_path.is_file() {
        let rows: Vec<ShotRow> = read_table(&shot_path, &SHOT_HEADER)?;
        let curve: Vec<NoisePoint> = read_table(&dir.join(NOISE_CURVE_FILE), &NOISE_CURVE_HEADER)?;
        let fits = ShotFits {
            s_min: cfg.s_min,
            noise_slope: super::studies::noise_curve_slope(&curve).unwrap_or(f64::NAN),
            ema_on: fit_delta(&rows, cfg.s_min, true).ok(),
            ema_off: fit_delta(&rows, cfg.s_min, false).ok(),
        };
        write_json(&dir.join(SHOT_FIT_FILE), &fits)?;
        outputs.push(SHOT_FIT_FILE);
        lines.push(format!("shot fit refreshed ({} rows)", rows.len()));
    }
    for (file, header) in [(FRONTIER_FILE, &FRONTIER_HEADER[..]), (NOISE_STUDY_FILE, &NOISE_HEADER[..])] {
        let p = dir.join(file);
        if p.is_file() {
            let n = if file == FRONTIER_FILE {
                read_table::<FrontierRow>(&p, header)?.len()
            } else {
                read_table::<NoiseRow>(&p, header)?.len()
            };
            lines.push(format!("{file}: {n} rows, schema ok"));
        }
    }
    let metrics = dir.join(METRICS_FILE);
    if metrics.is_file() {
        let n = crate::kd::read_metrics(&metrics)?.len();
        lines.push(format!("{METRICS_FILE}: {n} rows, columns {METRICS_HEADER:?}"));
    }

    let mut m = manifest;
    for o in outputs {
        if !m.outputs.iter().any(|x| x == o) {
            m.outputs.push(o.into());
        }
    }
    m.write(dir)?;
    Ok(Outcome { dirs: vec![dir.to_path_buf()], lines })
}

fn write_ema(dir: &Path, rep: &EmaReport) -> Result<()> {
    write_json(&dir.join(EMA_REPORT_FILE), rep)?;
    let rows: Vec<CdfRow> = rep.cdf.iter().map(|&(ratio, fraction)| CdfRow { ratio, fraction }).collect();
    write_table(&dir.join(EMA_CDF_FILE), &["ratio", "fraction"], &rows)
}
