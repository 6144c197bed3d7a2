//! Teacher training and the alternating photonic/classical student loop.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ce_and_accuracy, kd_loss, KdWeights};
use super::spsa::{spsa_update, SpsaConfig};
use crate::data::{permutation, Dataset};
use crate::dictconv::{CompressionConfig, Widths, NUM_CLASSES};
use crate::error::{config_err, Error, Result};
use crate::features::{
    drift_theta, trace_rows, EmaState, FeaturePipeline, FeatureStandardizer, NoiseConfig,
    SourceSettings, TraceRow, DEFAULT_EPS, FEATURE_DIM,
};
use crate::model::{Cnn, MixingMode};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::rng;

/// Rows per forward pass when only logits are needed.
pub const EVAL_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kd: KdWeights,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub theta_updates: usize,
    pub ema: bool,
    pub beta: f64,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kd: KdWeights::default(),
            epochs_teacher: 100,
            epochs_student: 100,
            batch_size: 64,
            theta_updates: 10,
            ema: true,
            beta: 0.9,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(config_err!("EMA beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lr > 0.0) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// One metrics row; `j` and `delta_theta_norm` are empty for teacher rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub ce_loss: f64,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    pub delta_theta_norm: Option<f64>,
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "split", "accuracy", "ce_loss", "J", "delta_theta_norm"];

pub fn write_metrics(path: &Path, rows: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::features::csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::features::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::features::csv_err(path, e))?;
    let headers = r.headers().map_err(|e| crate::features::csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset: 0,
            message: format!("metrics header must be {METRICS_HEADER:?}, found {headers:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| crate::features::csv_err(path, e))).collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct EpochStats {
    loss: f64,
    ce: f64,
    accuracy: f64,
}

/// One shuffled Adam epoch. With `targets == None` the loss is plain
/// cross-entropy.
#[allow(clippy::too_many_arguments)]
fn classical_epoch(
    net: &mut Cnn,
    adam: &mut AdamState,
    data: &Dataset,
    targets: Option<&[f64]>,
    mixings: &[Option<Tensor>],
    weights: KdWeights,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    let order = permutation(data.len(), rng::derive_seed(seed, rng::DATA, epoch as u64));
    let mut drop_rng = rng::stream(seed, rng::DROPOUT, epoch as u64);
    let w = if targets.is_some() { weights } else { KdWeights { tau: 1.0, lambda: 1.0 } };
    let mut stats = EpochStats::default();
    let mut hits = 0.0;
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let (x, labels) = data.batch(idx);
        let teacher: Vec<f64> = match targets {
            Some(t) => idx
                .iter()
                .flat_map(|&i| t[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter().copied())
                .collect(),
            None => vec![0.0; idx.len() * NUM_CLASSES],
        };
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = net.forward(&mut g, xv, mixings, true, &mut drop_rng)?;
        let s = g.value(logits).data().to_vec();
        let v = kd_loss(&s, &teacher, &labels, NUM_CLASSES, w)?;
        if !v.loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {b}")));
        }
        let (_, acc) = ce_and_accuracy(&s, &labels, NUM_CLASSES);
        let loss = g.external_scalar(logits, v.loss, v.grad);
        net.params.zero_grad();
        g.backward_into(loss, &mut net.params)?;
        adam_step(&mut net.params, adam)?;
        if !net.params.all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}, batch {b}")));
        }
        let n = idx.len() as f64;
        stats.loss += v.loss * n;
        stats.ce += v.ce * n;
        hits += acc * n;
    }
    let n = data.len().max(1) as f64;
    stats.loss /= n;
    stats.ce /= n;
    stats.accuracy = hits / n;
    Ok(stats)
}

fn evaluate(net: &Cnn, data: &Dataset, mixings: &[Option<Tensor>]) -> Result<(f64, f64)> {
    let logits = net.logits(&data.images, mixings, EVAL_CHUNK)?;
    Ok(ce_and_accuracy(&logits, &data.labels, NUM_CLASSES))
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub net: Cnn,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub metrics: Vec<MetricRecord>,
}

/// Cross-entropy training; returns the parameters of the epoch with the
/// highest validation accuracy (the initialisation when `epochs == 0`).
pub fn train_teacher(train: &Dataset, val: &Dataset, widths: Widths, cfg: &TrainConfig, seed: u64) -> Result<TeacherRun> {
    cfg.validate()?;
    let mut net = Cnn::teacher(widths, seed)?;
    let mut adam = AdamState::new(&net.params, cfg.adam())?;
    let none = [None, None, None];
    let (_, init_acc) = evaluate(&net, val, &none)?;
    let mut best = (0, init_acc, net.params.clone());
    let mut train_loss = Vec::with_capacity(cfg.epochs_teacher);
    let mut metrics = Vec::with_capacity(2 * cfg.epochs_teacher);
    for epoch in 1..=cfg.epochs_teacher {
        let st = classical_epoch(&mut net, &mut adam, train, None, &none, cfg.kd, cfg.batch_size, seed, epoch)?;
        let (val_ce, val_acc) = evaluate(&net, val, &none)?;
        log::info!("teacher epoch {epoch}: loss {:.4} train acc {:.4} val acc {val_acc:.4}", st.loss, st.accuracy);
        train_loss.push(st.loss);
        metrics.push(MetricRecord { epoch, split: "train".into(), accuracy: st.accuracy, ce_loss: st.ce, j: None, delta_theta_norm: None });
        metrics.push(MetricRecord { epoch, split: "val".into(), accuracy: val_acc, ce_loss: val_ce, j: None, delta_theta_norm: None });
        if epoch == 1 || val_acc > best.1 {
            best = (epoch, val_acc, net.params.clone());
        }
    }
    net.params = best.2;
    net.params.zero_grad();
    Ok(TeacherRun { net, best_epoch: best.0, best_val_accuracy: best.1, train_loss, metrics })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Mixing tensors trained directly; no photonic feature.
    Dict,
    /// Conditioning on a per-run fixed `z ~ N(0, I)`.
    RandZ,
    /// Circuit angles frozen at zero; feature re-sampled each epoch.
    FixedTheta,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "dict" => Ok(Self::Dict),
            "randz" => Ok(Self::RandZ),
            "fixedtheta" => Ok(Self::FixedTheta),
            other => Err(config_err!("unknown baseline '{other}' (none, dict, randz, fixedtheta)")),
        }
    }
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Dict => "dict",
            Self::RandZ => "randz",
            Self::FixedTheta => "fixedtheta",
        }
    }

    fn tunes_theta(self) -> bool {
        self == Self::None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqkdConfig {
    pub train: TrainConfig,
    pub compression: CompressionConfig,
    pub spsa: SpsaConfig,
    pub source: SourceSettings,
    pub gamma: f64,
    pub eps: f64,
    /// Feature evaluations used to fit the standardizer.
    pub stats_probes: usize,
    pub noise: NoiseConfig,
    pub baseline: Baseline,
    pub seed: u64,
}

impl PqkdConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.compression.validate()?;
        self.spsa.validate()?;
        self.noise.validate()?;
        if self.stats_probes < 2 {
            return Err(config_err!("standardizer needs at least 2 probe evaluations"));
        }
        if self.source.shots == 0 {
            return Err(config_err!("shot budget must be at least 1"));
        }
        Ok(())
    }
}

/// Fit the feature pipeline on `stats_probes` evaluations at angles drawn
/// uniformly from `[-theta_max, theta_max]`.
pub fn fit_pipeline(cfg: &PqkdConfig) -> Result<FeaturePipeline> {
    let mut r = rng::stream(cfg.seed, "stats-probe", 0);
    let m = cfg.spsa.theta_max;
    let probes: Vec<Vec<f64>> = (0..cfg.stats_probes)
        .map(|_| (0..cfg.compression.dim_theta).map(|_| r.random_range(-m..=m)).collect())
        .collect();
    FeaturePipeline::fit(cfg.source.clone(), &probes, cfg.seed, cfg.eps, cfg.gamma)?.with_corruption(cfg.noise.sigma_z)
}

/// Sampler seed for feature evaluation `slot` of `epoch`.
pub fn sampler_seed(run_seed: u64, epoch: usize, slot: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(run_seed, rng::SAMPLING, epoch as u64), "slot", slot)
}

const SLOT_DIAGNOSTIC: u64 = 1 << 20;
const SLOT_FEATURE: u64 = SLOT_DIAGNOSTIC + 1;

/// Fixed validation mini-batches with precomputed teacher logits.
#[derive(Clone, Debug)]
pub struct ProxyBatches {
    pub batches: Vec<(Tensor, Vec<usize>, Vec<f64>)>,
}

impl ProxyBatches {
    /// `count` batches from an epoch-seeded shuffle of the validation set.
    pub fn draw(val: &Dataset, teacher_logits: &[f64], count: usize, batch_size: usize, seed: u64, epoch: usize) -> Self {
        let order = permutation(val.len(), rng::derive_seed(seed, "proxy", epoch as u64));
        let batches = order
            .chunks(batch_size)
            .take(count)
            .map(|idx| {
                let (x, y) = val.batch(idx);
                let t = idx
                    .iter()
                    .flat_map(|&i| teacher_logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter().copied())
                    .collect();
                (x, y, t)
            })
            .collect();
        Self { batches }
    }
}

/// Mean KD loss of `student` on the proxy batches under the given mixings.
pub fn proxy_loss(student: &Cnn, mixings: &[Option<Tensor>], batches: &ProxyBatches, w: KdWeights) -> Result<f64> {
    let mut total = 0.0;
    for (x, y, t) in &batches.batches {
        let s = student.logits(x, mixings, EVAL_CHUNK)?;
        total += kd_loss(&s, t, y, NUM_CLASSES, w)?.loss;
    }
    Ok(total / batches.batches.len().max(1) as f64)
}

/// Validation objective `J(theta)`: fresh samples at `theta` (sampler seed
/// `seed`), standardized, then the mean KD loss on the proxy batches.
pub fn validation_proxy(
    theta: &[f64],
    student: &Cnn,
    pipeline: &FeaturePipeline,
    batches: &ProxyBatches,
    w: KdWeights,
    seed: u64,
) -> Result<f64> {
    let z = pipeline.evaluate(theta, seed)?.z;
    proxy_loss(student, &student.mixings(&z)?, batches, w)
}

#[derive(Clone, Debug)]
pub struct PqkdRun {
    pub student: Cnn,
    pub theta: Vec<f64>,
    pub z_used: Vec<f64>,
    pub pipeline: Option<FeaturePipeline>,
    pub metrics: Vec<MetricRecord>,
    /// Per-epoch standardized feature before (`z_raw`) and after EMA.
    pub trace: Vec<TraceRow>,
    /// Proxy objective after each photonic phase.
    pub j_history: Vec<f64>,
    /// `J(epoch 1) - J(final epoch)`.
    pub photonic_delta: f64,
    /// Objective evaluations spent by SPSA.
    pub spsa_evals: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Alternating loop: per epoch, SPSA on `theta` with the student frozen,
/// one (optionally EMA-smoothed) feature frozen for the epoch, then one
/// Adam epoch on the KD loss. The best-validation checkpoint is returned.
pub fn pqkd_train(
    train: &Dataset,
    val: &Dataset,
    test: Option<&Dataset>,
    teacher: &Cnn,
    cfg: &PqkdConfig,
) -> Result<PqkdRun> {
    cfg.validate()?;
    let seed = cfg.seed;
    let teacher_train = teacher.logits(&train.images, &[None, None, None], EVAL_CHUNK)?;
    let teacher_val = teacher.logits(&val.images, &[None, None, None], EVAL_CHUNK)?;

    let uses_pipeline = matches!(cfg.baseline, Baseline::None | Baseline::FixedTheta | Baseline::Dict);
    let pipeline = if uses_pipeline { Some(fit_pipeline(cfg)?) } else { None };
    let mut theta = vec![0.0; cfg.compression.dim_theta];

    let fixed_z = match cfg.baseline {
        Baseline::RandZ => {
            let mut r = rng::stream(seed, "randz", 0);
            Some((0..FEATURE_DIM).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect::<Vec<f64>>())
        }
        _ => None,
    };
    let z_init = match (&fixed_z, &pipeline) {
        (Some(z), _) => z.clone(),
        (None, Some(p)) => p.evaluate(&theta, sampler_seed(seed, 0, SLOT_FEATURE))?.z,
        (None, None) => unreachable!("every variant has a conditioning source"),
    };
    let mode = if cfg.baseline == Baseline::Dict { MixingMode::Trainable } else { MixingMode::Generated };
    let mut student = Cnn::student(&cfg.compression, FEATURE_DIM, seed, mode, &z_init)?;
    let mut adam = AdamState::new(&student.params, cfg.train.adam())?;
    let mut ema = EmaState::new(if cfg.train.ema { cfg.train.beta } else { 0.0 })?;

    let mut metrics = Vec::with_capacity(2 * cfg.train.epochs_student);
    let mut trace = Vec::new();
    let mut j_history = Vec::with_capacity(cfg.train.epochs_student);
    let mut spsa_evals = 0usize;
    let mut z_used = z_init.clone();
    let mut best: Option<(usize, f64, ParamSet, Vec<f64>, Vec<f64>)> = None;

    for epoch in 1..=cfg.train.epochs_student {
        if epoch > 1 && cfg.noise.sigma_theta > 0.0 {
            let mut r = rng::stream(seed, rng::NOISE, epoch as u64);
            theta = drift_theta(&theta, cfg.noise.sigma_theta, cfg.spsa.theta_max, &mut r)?;
        }
        let theta_before = theta.clone();
        let batches = ProxyBatches::draw(val, &teacher_val, cfg.spsa.val_batches, cfg.train.batch_size, seed, epoch);

        // photonic phase
        if cfg.baseline.tunes_theta() {
            let p = pipeline.as_ref().unwrap();
            let mut dir_rng = rng::stream(seed, rng::SPSA, epoch as u64);
            for u in 0..cfg.train.theta_updates {
                let mut slot = 2 * u as u64;
                let step = spsa_update(
                    &theta,
                    |t| {
                        spsa_evals += 1;
                        let s = sampler_seed(seed, epoch, slot);
                        slot += 1;
                        validation_proxy(t, &student, p, &batches, cfg.train.kd, s)
                    },
                    &cfg.spsa,
                    &mut dir_rng,
                )?;
                theta = step.theta;
            }
        }
        let delta_theta = theta.iter().zip(&theta_before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

        // feature for the epoch
        let z_now = match (&fixed_z, &pipeline) {
            (Some(z), _) => z.clone(),
            (None, Some(p)) => p.evaluate(&theta, sampler_seed(seed, epoch, SLOT_FEATURE))?.z,
            (None, None) => unreachable!(),
        };
        z_used = if fixed_z.is_some() { z_now.clone() } else { ema.update(&z_now)?.to_vec() };
        trace.extend(trace_rows(epoch, &z_now, &z_used));
        let mixings = student.mixings(&z_used)?;
        let j = proxy_loss(&student, &mixings, &batches, cfg.train.kd)?;
        j_history.push(j);

        // classical phase
        let st = classical_epoch(
            &mut student,
            &mut adam,
            train,
            Some(&teacher_train),
            &mixings,
            cfg.train.kd,
            cfg.train.batch_size,
            seed,
            epoch,
        )?;
        let (val_ce, val_acc) = evaluate(&student, val, &mixings)?;
        log::info!(
            "student epoch {epoch}: J {j:.4} |dtheta| {delta_theta:.4} train acc {:.4} val acc {val_acc:.4}",
            st.accuracy
        );
        metrics.push(MetricRecord { epoch, split: "train".into(), accuracy: st.accuracy, ce_loss: st.ce, j: Some(j), delta_theta_norm: Some(delta_theta) });
        metrics.push(MetricRecord { epoch, split: "val".into(), accuracy: val_acc, ce_loss: val_ce, j: Some(j), delta_theta_norm: Some(delta_theta) });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, student.params.clone(), theta.clone(), z_used.clone()));
        }
    }

    let (best_epoch, best_val_accuracy) = match best {
        Some((e, acc, params, th, z)) => {
            student.params = params;
            theta = th;
            z_used = z;
            (e, acc)
        }
        None => (0, evaluate(&student, val, &student.mixings(&z_used)?)?.1),
    };
    student.params.zero_grad();
    let test_accuracy = match test {
        Some(t) if !t.is_empty() => Some(evaluate(&student, t, &student.mixings(&z_used)?)?.1),
        _ => None,
    };
    let photonic_delta = match (j_history.first(), j_history.last()) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    Ok(PqkdRun {
        student,
        theta,
        z_used,
        pipeline,
        metrics,
        trace,
        j_history,
        photonic_delta,
        spsa_evals,
        best_epoch,
        best_val_accuracy,
        test_accuracy,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint for a teacher or a student.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Widths,
    pub compression: Option<CompressionConfig>,
    pub seed: u64,
    pub params: ParamSet,
    pub theta: Vec<f64>,
    pub z_used: Vec<f64>,
    pub standardizer: Option<FeatureStandardizer>,
}

impl Checkpoint {
    pub fn teacher(run: &TeacherRun, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            widths: run.net.widths,
            compression: None,
            seed,
            params: run.net.params.clone(),
            theta: Vec::new(),
            z_used: Vec::new(),
            standardizer: None,
        }
    }

    pub fn student(run: &PqkdRun, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            widths: run.student.widths,
            compression: run.student.compression.clone(),
            seed,
            params: run.student.params.clone(),
            theta: run.theta.clone(),
            z_used: run.z_used.clone(),
            standardizer: run.pipeline.as_ref().map(|p| p.standardizer.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                file: path.to_path_buf(),
                offset: 0,
                message: format!("checkpoint version {} unsupported", ck.version),
            });
        }
        Ok(ck)
    }

    /// Rebuild the network: architecture and projections come from the
    /// stored configuration and seed, trainables from the stored tensors.
    pub fn restore(&self) -> Result<Cnn> {
        let mut net = match &self.compression {
            None => Cnn::teacher(self.widths, self.seed)?,
            Some(c) => {
                let mode = if c.mixing_trainable { MixingMode::Trainable } else { MixingMode::Generated };
                let mut plain = c.clone();
                plain.mixing_trainable = false;
                Cnn::student(&plain, FEATURE_DIM, self.seed, mode, &self.z_used)?
            }
        };
        if net.params.len() != self.params.len()
            || net.params.iter().zip(self.params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
        {
            return Err(config_err!("checkpoint tensors do not match the stored architecture"));
        }
        net.params = self.params.clone();
        Ok(net)
    }
}

/// Standard desk-scale defaults for a student run.
pub fn default_pqkd_config(compression: CompressionConfig, shots: usize, seed: u64) -> PqkdConfig {
    PqkdConfig {
        train: TrainConfig::default(),
        compression,
        spsa: SpsaConfig::default(),
        source: SourceSettings::new(crate::photonic::SamplingModel::Distinguishable, shots),
        gamma: 1.0,
        eps: DEFAULT_EPS,
        stats_probes: 32,
        noise: NoiseConfig::default(),
        baseline: Baseline::None,
        seed,
    }
}
