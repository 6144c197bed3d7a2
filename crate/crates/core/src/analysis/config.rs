//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dictconv::{CompressionConfig, Scope, Widths};
use crate::error::{config_err, Error, Result};
use crate::features::{NoiseConfig, SourceSettings, DEFAULT_EPS};
use crate::kd::{Baseline, KdWeights, PqkdConfig, SpsaConfig, TrainConfig};
use crate::photonic::SamplingModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetChoice {
    Synthetic,
    /// IDX files in a directory (MNIST / Fashion-MNIST naming).
    Idx(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetChoice,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub widths: Widths,
    pub scope: Scope,
    pub ranks: Vec<usize>,
    pub dim_theta: usize,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub theta_updates: usize,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub ema: bool,
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub stats_probes: usize,
    pub model: SamplingModel,
    pub baseline: Baseline,
    pub spsa_a: f64,
    pub spsa_c: f64,
    pub theta_max: f64,
    pub val_batches: usize,
    pub sigma_z: f64,
    pub sigma_theta: f64,
    /// Optional teacher checkpoint reused by student commands.
    pub teacher: Option<PathBuf>,
    pub shot_grid: Vec<usize>,
    pub shot_trials: usize,
    pub s_min: f64,
    /// Random draws for the Lipschitz suite and sampler runs for the
    /// per-bin histogram check.
    pub bound_trials: usize,
    /// Binomial draws for the single-bin Hoeffding check.
    pub hoeffding_trials: usize,
    /// Inclusive epoch range for the EMA report (whole trace when None).
    pub ema_window: Option<(usize, usize)>,
    pub sigma_z_grid: Vec<f64>,
    pub sigma_theta_grid: Vec<f64>,
    pub sweep_scopes: Vec<Scope>,
    pub sweep_ranks: Vec<usize>,
    pub sweep_dims: Vec<usize>,
    pub sweep_widths: Vec<Widths>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetChoice::Synthetic,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            widths: Widths::new(16, 32, 64),
            scope: Scope::AllConvs,
            ranks: vec![8, 8, 8],
            dim_theta: 30,
            shots: 200,
            seeds: vec![0, 1, 2],
            epochs_teacher: 20,
            epochs_student: 30,
            batch_size: 64,
            theta_updates: 10,
            lr: 1e-3,
            tau: 3.0,
            lambda: 0.5,
            ema: true,
            beta: 0.9,
            gamma: 1.0,
            eps: DEFAULT_EPS,
            stats_probes: 32,
            model: SamplingModel::Distinguishable,
            baseline: Baseline::None,
            spsa_a: 0.1,
            spsa_c: 0.1,
            theta_max: std::f64::consts::PI,
            val_batches: 4,
            sigma_z: 0.0,
            sigma_theta: 0.0,
            teacher: None,
            shot_grid: vec![50, 100, 200, 400, 800, 1600, 3200, 6400],
            shot_trials: 20,
            s_min: 75.0,
            bound_trials: 1000,
            hoeffding_trials: 100_000,
            ema_window: None,
            sigma_z_grid: vec![0.0, 0.1, 0.3, 1.0],
            sigma_theta_grid: vec![0.0, 0.05, 0.1, 0.3],
            sweep_scopes: vec![Scope::Conv1, Scope::Conv12, Scope::AllConvs],
            sweep_ranks: vec![4, 8, 12],
            sweep_dims: vec![15, 30, 45],
            sweep_widths: vec![Widths::new(16, 32, 64)],
            out: PathBuf::from("runs/default"),
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| config_err!("bad entry '{t}' for key '{key}'")))
        .collect()
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| config_err!("bad value '{v}' for key '{key}'"))
}

fn switch(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("bad value '{v}' for key '{key}' (expected on/off)")),
    }
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_widths(w: Widths) -> String {
    format!("{},{},{}", w.c1, w.c2, w.c3)
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected so typos do not silently fall back to defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut ranks_given = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected 'key = value', got '{line}'", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "ranks" {
                ranks_given = true;
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => config_err!("line {}: {m}", n + 1),
                other => other,
            })?;
        }
        if !ranks_given {
            cfg.fit_ranks();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resize a uniform rank list to the scope's layer count.
    fn fit_ranks(&mut self) {
        let n = self.scope.n_layers();
        if let Some(&r) = self.ranks.first() {
            if self.ranks.iter().all(|&x| x == r) {
                self.ranks = vec![r; n];
            }
        }
    }

    /// Apply `(key, value)` overrides on top of a parsed configuration.
    pub fn apply(&mut self, overrides: &[(&str, String)]) -> Result<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        if !overrides.iter().any(|(k, _)| *k == "ranks") {
            self.fit_ranks();
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetChoice::Synthetic,
                    _ => match v.strip_prefix("idx:") {
                        Some(dir) => DatasetChoice::Idx(PathBuf::from(dir.trim())),
                        None => return Err(config_err!("dataset must be 'synthetic' or 'idx:<dir>', got '{v}'")),
                    },
                }
            }
            "n_train" => self.n_train = scalar(k, v)?,
            "n_val" => self.n_val = scalar(k, v)?,
            "n_test" => self.n_test = scalar(k, v)?,
            "widths" => self.widths = v.parse()?,
            "scope" => self.scope = v.parse()?,
            "ranks" => self.ranks = list(k, v)?,
            "dim_theta" => self.dim_theta = scalar(k, v)?,
            "shots" => self.shots = scalar(k, v)?,
            "seeds" => self.seeds = list(k, v)?,
            "epochs_teacher" => self.epochs_teacher = scalar(k, v)?,
            "epochs_student" => self.epochs_student = scalar(k, v)?,
            "batch_size" => self.batch_size = scalar(k, v)?,
            "theta_updates" => self.theta_updates = scalar(k, v)?,
            "lr" => self.lr = scalar(k, v)?,
            "tau" => self.tau = scalar(k, v)?,
            "lambda" => self.lambda = scalar(k, v)?,
            "ema" => self.ema = switch(k, v)?,
            "beta" => self.beta = scalar(k, v)?,
            "gamma" => self.gamma = scalar(k, v)?,
            "eps" => self.eps = scalar(k, v)?,
            "stats_probes" => self.stats_probes = scalar(k, v)?,
            "model" => self.model = v.parse()?,
            "baseline" => self.baseline = v.parse()?,
            "spsa_a" => self.spsa_a = scalar(k, v)?,
            "spsa_c" => self.spsa_c = scalar(k, v)?,
            "theta_max" => self.theta_max = scalar(k, v)?,
            "val_batches" => self.val_batches = scalar(k, v)?,
            "sigma_z" => self.sigma_z = scalar(k, v)?,
            "sigma_theta" => self.sigma_theta = scalar(k, v)?,
            "teacher" => self.teacher = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "shot_grid" => self.shot_grid = list(k, v)?,
            "shot_trials" => self.shot_trials = scalar(k, v)?,
            "s_min" => self.s_min = scalar(k, v)?,
            "bound_trials" => self.bound_trials = scalar(k, v)?,
            "hoeffding_trials" => self.hoeffding_trials = scalar(k, v)?,
            "ema_window" => {
                self.ema_window = match list::<usize>(k, v)?.as_slice() {
                    [] => None,
                    &[a, b] if a <= b => Some((a, b)),
                    _ => return Err(config_err!("ema_window must be 'first,last' epochs, got '{v}'")),
                }
            }
            "sigma_z_grid" => self.sigma_z_grid = list(k, v)?,
            "sigma_theta_grid" => self.sigma_theta_grid = list(k, v)?,
            "sweep_scopes" => self.sweep_scopes = list(k, v)?,
            "sweep_ranks" => self.sweep_ranks = list(k, v)?,
            "sweep_dims" => self.sweep_dims = list(k, v)?,
            "sweep_widths" => {
                self.sweep_widths = v
                    .split(';')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "out" => self.out = PathBuf::from(v),
            other => return Err(config_err!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err!("at least one seed is required"));
        }
        self.compression()?;
        self.pqkd(self.seeds[0])?.validate()?;
        if self.n_train == 0 || self.n_val == 0 {
            return Err(config_err!("n_train and n_val must be positive"));
        }
        Ok(())
    }

    pub fn compression(&self) -> Result<CompressionConfig> {
        CompressionConfig::new(self.scope, self.ranks.clone(), self.dim_theta, self.widths)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            kd: KdWeights { tau: self.tau, lambda: self.lambda },
            epochs_teacher: self.epochs_teacher,
            epochs_student: self.epochs_student,
            batch_size: self.batch_size,
            theta_updates: self.theta_updates,
            ema: self.ema,
            beta: self.beta,
            lr: self.lr,
        }
    }

    /// Student-run bundle for one seed.
    pub fn pqkd(&self, seed: u64) -> Result<PqkdConfig> {
        let source = SourceSettings::new(self.model, self.shots);
        Ok(PqkdConfig {
            train: self.train(),
            compression: self.compression()?,
            spsa: SpsaConfig { a: self.spsa_a, c: self.spsa_c, theta_max: self.theta_max, val_batches: self.val_batches },
            source,
            gamma: self.gamma,
            eps: self.eps,
            stats_probes: self.stats_probes,
            noise: NoiseConfig { sigma_z: self.sigma_z, sigma_theta: self.sigma_theta },
            baseline: self.baseline,
            seed,
        })
    }

    /// Every effective field as text, for the manifest echo.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put(
            "dataset",
            match &self.dataset {
                DatasetChoice::Synthetic => "synthetic".into(),
                DatasetChoice::Idx(p) => format!("idx:{}", p.display()),
            },
        );
        put("n_train", self.n_train.to_string());
        put("n_val", self.n_val.to_string());
        put("n_test", self.n_test.to_string());
        put("widths", fmt_widths(self.widths));
        put("scope", self.scope.label().into());
        put("ranks", fmt_list(&self.ranks));
        put("dim_theta", self.dim_theta.to_string());
        put("shots", self.shots.to_string());
        put("seeds", fmt_list(&self.seeds));
        put("epochs_teacher", self.epochs_teacher.to_string());
        put("epochs_student", self.epochs_student.to_string());
        put("batch_size", self.batch_size.to_string());
        put("theta_updates", self.theta_updates.to_string());
        put("lr", self.lr.to_string());
        put("tau", self.tau.to_string());
        put("lambda", self.lambda.to_string());
        put("ema", if self.ema { "on" } else { "off" }.into());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        put("eps", self.eps.to_string());
        put("stats_probes", self.stats_probes.to_string());
        put(
            "model",
            match self.model {
                SamplingModel::Distinguishable => "distinguishable",
                SamplingModel::ExactBoson => "exact_boson",
            }
            .into(),
        );
        put("baseline", self.baseline.label().into());
        put("spsa_a", self.spsa_a.to_string());
        put("spsa_c", self.spsa_c.to_string());
        put("theta_max", self.theta_max.to_string());
        put("val_batches", self.val_batches.to_string());
        put("sigma_z", self.sigma_z.to_string());
        put("sigma_theta", self.sigma_theta.to_string());
        put("teacher", self.teacher.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("shot_grid", fmt_list(&self.shot_grid));
        put("shot_trials", self.shot_trials.to_string());
        put("s_min", self.s_min.to_string());
        put("bound_trials", self.bound_trials.to_string());
        put("hoeffding_trials", self.hoeffding_trials.to_string());
        put("ema_window", self.ema_window.map(|(a, b)| format!("{a},{b}")).unwrap_or_default());
        put("sigma_z_grid", fmt_list(&self.sigma_z_grid));
        put("sigma_theta_grid", fmt_list(&self.sigma_theta_grid));
        put("sweep_scopes", self.sweep_scopes.iter().map(|s| s.label()).collect::<Vec<_>>().join(","));
        put("sweep_ranks", fmt_list(&self.sweep_ranks));
        put("sweep_dims", fmt_list(&self.sweep_dims));
        put("sweep_widths", self.sweep_widths.iter().map(|w| fmt_widths(*w)).collect::<Vec<_>>().join(";"));
        put("out", self.out.display().to_string());
        m
    }

    /// Render back to config-file text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse("# desk run\nscope = conv12\nranks = 4,8\nshots=50 # low\nema = off\nsweep_widths = 8,8,8; 4,6,8\n").unwrap();
        assert_eq!(cfg.scope, Scope::Conv12);
        assert_eq!(cfg.ranks, vec![4, 8]);
        assert_eq!(cfg.shots, 50);
        assert!(!cfg.ema);
        assert_eq!(cfg.sweep_widths, vec![Widths::new(8, 8, 8), Widths::new(4, 6, 8)]);
    }

    #[test]
    fn single_rank_expands_to_scope() {
        let cfg = RunConfig::parse("scope = conv1\n").unwrap();
        assert_eq!(cfg.ranks, vec![8]);
    }

    #[test]
    fn overrides_refit_uniform_ranks() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[("scope", "conv12".into()), ("shots", "64".into())]).unwrap();
        assert_eq!((cfg.ranks.clone(), cfg.shots), (vec![8, 8], 64));
        assert!(cfg.apply(&[("ranks", "4,8,12".into())]).is_err());
    }

    #[test]
    fn unknown_key_names_line() {
        let err = RunConfig::parse("shots = 10\nshtos = 5\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("shtos"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse("scope = conv12\nranks = 4,12\ndataset = idx:/data/mnist\nema_window = 5,30\n").unwrap();
        cfg.teacher = Some(PathBuf::from("t.json"));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
