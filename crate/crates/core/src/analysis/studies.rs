//! Shot-budget, noise-robustness and compression-frontier studies.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{DatasetChoice, RunConfig};
use super::fit::{fit_shot_model, loglog_slope, FitResult, ShotPoint};
use crate::data::{find_idx_files, gen_synthetic, load_idx, permutation, split, Dataset, SyntheticConfig};
use crate::dictconv::{count_params, CompressionConfig, Scope, Widths};
use crate::error::{config_err, usage_err, Error, Result};
use crate::features::{csv_err, SourceSettings};
use crate::kd::{pqkd_train, train_teacher, Checkpoint, PqkdConfig};
use crate::model::Cnn;
use crate::rng;

/// Environment variable holding the worker-thread count for studies.
pub const WORKERS_ENV: &str = "PQKD_WORKERS";

fn pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err!("{WORKERS_ENV} must be a positive integer, got '{v}'"))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| config_err!("cannot start worker pool: {e}"))
}

/// Ordered parallel map; results do not depend on the worker count.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    pool()?.install(|| items.par_iter().map(&f).collect())
}

/// Write rows with an explicit header (also for an empty table).
pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read rows, rejecting any file whose header differs from `header`.
pub fn read_table<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset: 0,
            message: format!("header must be {header:?}, found {found:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Train/val/test sets for one seed. Synthetic data is generated and split
/// with the seed; IDX data splits the training file and takes the test set
/// from the official test file.
pub fn load_splits(cfg: &RunConfig, seed: u64) -> Result<Splits> {
    match &cfg.dataset {
        DatasetChoice::Synthetic => {
            let total = cfg.n_train + cfg.n_val + cfg.n_test;
            let ds = gen_synthetic(&SyntheticConfig::new(total.div_ceil(10), seed))?;
            let (train, val, test) = split(&ds, rng::derive_seed(seed, rng::DATA, u64::MAX), (cfg.n_train, cfg.n_val, cfg.n_test))?;
            Ok(Splits { train, val, test })
        }
        DatasetChoice::Idx(dir) => {
            let [tri, trl, tei, tel] = find_idx_files(dir)
                .ok_or_else(|| usage_err!("no MNIST-style IDX files in {}", dir.display()))?;
            let full = load_idx(&tri, &trl)?;
            let (train, val, _) = split(&full, rng::derive_seed(seed, rng::DATA, u64::MAX), (cfg.n_train, cfg.n_val, 0))?;
            let test_full = load_idx(&tei, &tel)?;
            let n_test = cfg.n_test.min(test_full.len());
            let idx = &permutation(test_full.len(), rng::derive_seed(seed, rng::DATA, u64::MAX - 1))[..n_test];
            Ok(Splits { train, val, test: test_full.subset(idx, "test") })
        }
    }
}

/// Teacher for one seed: loaded from `cfg.teacher` when set, else trained.
/// Returns the network and its best validation accuracy.
pub fn teacher_for(cfg: &RunConfig, widths: Widths, seed: u64, data: &Splits) -> Result<(Cnn, f64)> {
    if let Some(path) = &cfg.teacher {
        let ck = Checkpoint::load(path)?;
        if ck.widths != widths || ck.compression.is_some() {
            return Err(config_err!("{} is not a teacher checkpoint with widths {widths:?}", path.display()));
        }
        let net = ck.restore()?;
        let logits = net.logits(&data.val.images, &[None, None, None], crate::kd::EVAL_CHUNK)?;
        let (_, acc) = crate::kd::ce_and_accuracy(&logits, &data.val.labels, crate::dictconv::NUM_CLASSES);
        return Ok((net, acc));
    }
    let run = train_teacher(&data.train, &data.val, widths, &cfg.train(), seed)?;
    Ok((run.net, run.best_val_accuracy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub shots: usize,
    pub trials: usize,
    pub mean: f64,
    pub sd: f64,
}

pub const NOISE_CURVE_HEADER: [&str; 4] = ["shots", "trials", "mean", "sd"];

/// Mean and sample sd of `||z_tilde_S - z_inf||_2` over `trials` sampler
/// runs per shot budget, against the exact infinite-shot histogram.
pub fn feature_noise_curve(
    source: &SourceSettings,
    theta: &[f64],
    grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<NoisePoint>> {
    if trials == 0 {
        return Err(config_err!("noise curve needs at least one trial"));
    }
    let z_inf = source.exact_feature(theta)?;
    par_map(grid, |&shots| {
        let src = SourceSettings { shots, ..source.clone() };
        let norms = (0..trials)
            .map(|t| {
                let z = src.raw_feature(theta, rng::derive_seed(rng::derive_seed(seed, "noise-curve", shots as u64), "trial", t as u64))?;
                Ok(z.iter().zip(&z_inf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, sd) = mean_sd(&norms);
        Ok(NoisePoint { shots, trials, mean, sd })
    })
}

/// Log-log slope of the mean feature error against S.
pub fn noise_curve_slope(points: &[NoisePoint]) -> Result<f64> {
    let x: Vec<f64> = points.iter().map(|p| p.shots as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean).collect();
    loglog_slope(&x, &y)
}

/// Angles `U[-theta_max, theta_max]` for analyses that need a generic point.
pub fn probe_theta(dim: usize, theta_max: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "probe-theta", 0);
    (0..dim).map(|_| r.random_range(-theta_max..=theta_max)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub shots: usize,
    pub seeds: usize,
    pub feature_error: f64,
    pub delta_ema_mean: f64,
    pub delta_ema_sd: f64,
    pub delta_raw_mean: f64,
    pub delta_raw_sd: f64,
}

pub const SHOT_HEADER: [&str; 7] = [
    "shots",
    "seeds",
    "feature_error",
    "delta_ema_mean",
    "delta_ema_sd",
    "delta_raw_mean",
    "delta_raw_sd",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotStudy {
    pub rows: Vec<ShotRow>,
    pub noise_curve: Vec<NoisePoint>,
    pub noise_slope: f64,
    pub fit_ema: Option<FitResult>,
    pub fit_raw: Option<FitResult>,
}

fn test_accuracy_pp(data: &Splits, teacher: &Cnn, cfg: &PqkdConfig) -> Result<f64> {
    let run = pqkd_train(&data.train, &data.val, Some(&data.test), teacher, cfg)?;
    Ok(100.0 * run.test_accuracy.unwrap_or(f64::NAN))
}

/// Fit `delta(S)` on per-S means with the variance of the mean as weight.
pub fn fit_delta(rows: &[ShotRow], s_min: f64, ema: bool) -> Result<FitResult> {
    let points: Vec<ShotPoint> = rows
        .iter()
        .map(|r| {
            let (m, sd) = if ema { (r.delta_ema_mean, r.delta_ema_sd) } else { (r.delta_raw_mean, r.delta_raw_sd) };
            ShotPoint { shots: r.shots as f64, mean: m, variance: sd * sd / r.seeds as f64 }
        })
        .collect();
    fit_shot_model(&points, s_min)
}

/// Per shot budget and seed: PQKD with and without EMA, against one
/// `gamma = 0` ablation per seed; delta is in test-accuracy points.
pub fn shot_study(cfg: &RunConfig) -> Result<ShotStudy> {
    if cfg.shot_grid.is_empty() {
        return Err(config_err!("shot_grid is empty"));
    }
    let seeds = cfg.seeds.clone();
    let base: Vec<(Splits, Cnn, f64)> = par_map(&seeds, |&seed| {
        let data = load_splits(cfg, seed)?;
        let (teacher, _) = teacher_for(cfg, cfg.widths, seed, &data)?;
        let mut ablation = cfg.pqkd(seed)?;
        ablation.gamma = 0.0;
        let acc0 = test_accuracy_pp(&data, &teacher, &ablation)?;
        Ok((data, teacher, acc0))
    })?;

    let jobs: Vec<(usize, usize, bool)> = cfg
        .shot_grid
        .iter()
        .flat_map(|&s| (0..seeds.len()).flat_map(move |i| [(s, i, true), (s, i, false)]))
        .collect();
    let deltas = par_map(&jobs, |&(shots, i, ema)| {
        let (data, teacher, acc0) = &base[i];
        let mut p = cfg.pqkd(seeds[i])?;
        p.source.shots = shots;
        p.train.ema = ema;
        Ok(test_accuracy_pp(data, teacher, &p)? - acc0)
    })?;

    let theta = probe_theta(cfg.dim_theta, cfg.theta_max, seeds[0]);
    let source = SourceSettings::new(cfg.model, cfg.shots);
    let noise_curve = feature_noise_curve(&source, &theta, &cfg.shot_grid, cfg.shot_trials, seeds[0])?;
    let noise_slope = if cfg.shot_grid.len() >= 2 { noise_curve_slope(&noise_curve)? } else { f64::NAN };

    let per_s = 2 * seeds.len();
    let rows: Vec<ShotRow> = cfg
        .shot_grid
        .iter()
        .enumerate()
        .map(|(k, &shots)| {
            let chunk = &deltas[k * per_s..(k + 1) * per_s];
            let on: Vec<f64> = chunk.iter().step_by(2).copied().collect();
            let off: Vec<f64> = chunk.iter().skip(1).step_by(2).copied().collect();
            let (em, es) = mean_sd(&on);
            let (rm, rs) = mean_sd(&off);
            ShotRow {
                shots,
                seeds: seeds.len(),
                feature_error: noise_curve[k].mean,
                delta_ema_mean: em,
                delta_ema_sd: es,
                delta_raw_mean: rm,
                delta_raw_sd: rs,
            }
        })
        .collect();
    let fit_ema = fit_delta(&rows, cfg.s_min, true).map_err(|e| log::warn!("EMA-on fit skipped: {e}")).ok();
    let fit_raw = fit_delta(&rows, cfg.s_min, false).map_err(|e| log::warn!("EMA-off fit skipped: {e}")).ok();
    Ok(ShotStudy { rows, noise_curve, noise_slope, fit_ema, fit_raw })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    /// `sigma_z` (feature corruption) or `sigma_theta` (parameter drift).
    pub kind: String,
    pub sigma: f64,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_sd: f64,
}

pub const NOISE_HEADER: [&str; 5] = ["kind", "sigma", "seeds", "acc_mean", "acc_sd"];

/// Student test accuracy (points) over the `sigma_z` and `sigma_theta`
/// grids, each swept with the other noise source off.
pub fn noise_study(cfg: &RunConfig) -> Result<Vec<NoiseRow>> {
    let base: Vec<(Splits, Cnn)> = par_map(&cfg.seeds, |&seed| {
        let data = load_splits(cfg, seed)?;
        let (teacher, _) = teacher_for(cfg, cfg.widths, seed, &data)?;
        Ok((data, teacher))
    })?;
    let cells: Vec<(&str, f64)> = cfg
        .sigma_z_grid
        .iter()
        .map(|&s| ("sigma_z", s))
        .chain(cfg.sigma_theta_grid.iter().map(|&s| ("sigma_theta", s)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.seeds.len()).map(move |i| (c, i))).collect();
    let accs = par_map(&jobs, |&(c, i)| {
        let (kind, sigma) = cells[c];
        let mut p = cfg.pqkd(cfg.seeds[i])?;
        p.noise.sigma_z = 0.0;
        p.noise.sigma_theta = 0.0;
        match kind {
            "sigma_z" => p.noise.sigma_z = sigma,
            _ => p.noise.sigma_theta = sigma,
        }
        test_accuracy_pp(&base[i].0, &base[i].1, &p)
    })?;
    Ok(cells
        .iter()
        .zip(accs.chunks(cfg.seeds.len()))
        .map(|(&(kind, sigma), a)| {
            let (acc_mean, acc_sd) = mean_sd(a);
            NoiseRow { kind: kind.into(), sigma, seeds: a.len(), acc_mean, acc_sd }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub scope: Scope,
    pub rank: usize,
    pub dim_theta: usize,
    pub cx: f64,
    pub cx_conv: f64,
    pub seeds: usize,
    pub drop_mean: f64,
    pub drop_sd: f64,
}

pub const FRONTIER_HEADER: [&str; 11] =
    ["c1", "c2", "c3", "scope", "rank", "dim_theta", "cx", "cx_conv", "seeds", "drop_mean", "drop_sd"];

/// Every (widths, scope, rank, dim_theta) cell with its compression factor
/// and the validation-accuracy drop (points) from teacher to student.
/// `train == false` fills only the accounting columns.
pub fn frontier_sweep(cfg: &RunConfig, train: bool) -> Result<Vec<FrontierRow>> {
    let mut cells = Vec::new();
    for &w in &cfg.sweep_widths {
        for &scope in &cfg.sweep_scopes {
            for &rank in &cfg.sweep_ranks {
                for &dim in &cfg.sweep_dims {
                    cells.push(CompressionConfig::uniform(scope, rank, dim, w)?);
                }
            }
        }
    }
    let drops: Vec<Vec<f64>> = if train {
        let teacher_jobs: Vec<(Widths, u64)> =
            cfg.sweep_widths.iter().flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s))).collect();
        let teachers = par_map(&teacher_jobs, |&(w, seed)| {
            let data = load_splits(cfg, seed)?;
            let (net, acc) = teacher_for(cfg, w, seed, &data)?;
            Ok((data, net, acc))
        })?;
        let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..cfg.seeds.len()).map(move |i| (c, i))).collect();
        let flat = par_map(&jobs, |&(c, i)| {
            let wi = cfg.sweep_widths.iter().position(|w| *w == cells[c].widths).unwrap();
            let (data, teacher, t_acc) = &teachers[wi * cfg.seeds.len() + i];
            let p = PqkdConfig { compression: cells[c].clone(), ..cfg.pqkd(cfg.seeds[i])? };
            let run = pqkd_train(&data.train, &data.val, None, teacher, &p)?;
            Ok(100.0 * (t_acc - run.best_val_accuracy))
        })?;
        flat.chunks(cfg.seeds.len()).map(<[f64]>::to_vec).collect()
    } else {
        vec![Vec::new(); cells.len()]
    };
    cells
        .iter()
        .zip(drops)
        .map(|(c, d)| {
            let report = count_params(c)?;
            let (drop_mean, drop_sd) = if d.is_empty() { (f64::NAN, f64::NAN) } else { mean_sd(&d) };
            Ok(FrontierRow {
                c1: c.widths.c1,
                c2: c.widths.c2,
                c3: c.widths.c3,
                scope: c.scope,
                rank: c.ranks[0],
                dim_theta: c.dim_theta,
                cx: report.cr_overall,
                cx_conv: report.cr_conv,
                seeds: d.len(),
                drop_mean,
                drop_sd,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonic::SamplingModel;

    #[test]
    fn table_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        let rows = vec![NoisePoint { shots: 50, trials: 3, mean: 0.25, sd: 0.01 }];
        write_table(&p, &NOISE_CURVE_HEADER, &rows).unwrap();
        assert_eq!(read_table::<NoisePoint>(&p, &NOISE_CURVE_HEADER).unwrap(), rows);
        assert!(read_table::<NoisePoint>(&p, &SHOT_HEADER).is_err());
        write_table::<NoisePoint>(&p, &NOISE_CURVE_HEADER, &[]).unwrap();
        assert!(read_table::<NoisePoint>(&p, &NOISE_CURVE_HEADER).unwrap().is_empty());
    }

    #[test]
    fn duplicated_shot_budget_gives_identical_points() {
        let src = SourceSettings::new(SamplingModel::Distinguishable, 100);
        let theta = probe_theta(15, std::f64::consts::PI, 3);
        let pts = feature_noise_curve(&src, &theta, &[100, 400, 100], 4, 9).unwrap();
        assert_eq!(pts[0], pts[2]);
        assert!(pts[1].mean < pts[0].mean);
    }

    #[test]
    fn frontier_accounting_without_training() {
        let cfg = RunConfig { sweep_widths: vec![Widths::new(32, 64, 128)], ..RunConfig::default() };
        let rows = frontier_sweep(&cfg, false).unwrap();
        assert_eq!(rows.len(), 3 * 3 * 3);
        for r in rows.iter().filter(|r| r.scope == Scope::Conv1) {
            assert!((r.cx - 1.01).abs() < 0.011, "{r:?}");
        }
    }
}
