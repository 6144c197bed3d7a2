//! Trainable-parameter accounting for teacher and compressed students.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const NUM_CLASSES: usize = 10;
pub const IN_CHANNELS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl Widths {
    pub const fn new(c1: usize, c2: usize, c3: usize) -> Self {
        Self { c1, c2, c3 }
    }

    /// `(C_in, C_out, k, padding)` for conv1..conv3.
    pub fn conv_geometry(&self) -> [(usize, usize, usize, usize); 3] {
        [
            (IN_CHANNELS, self.c1, 5, 2),
            (self.c1, self.c2, 3, 1),
            (self.c2, self.c3, 3, 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(config_err!("channel widths must be positive, got {self:?}"));
        }
        Ok(())
    }
}

impl std::str::FromStr for Widths {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| config_err!("bad width '{t}' in '{s}'")))
            .collect::<Result<_>>()?;
        match v[..] {
            [c1, c2, c3] => Ok(Self::new(c1, c2, c3)),
            _ => Err(config_err!("widths need three values, got '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Conv1,
    Conv12,
    AllConvs,
}

impl Scope {
    pub fn n_layers(self) -> usize {
        match self {
            Scope::Conv1 => 1,
            Scope::Conv12 => 2,
            Scope::AllConvs => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scope::Conv1 => "conv1",
            Scope::Conv12 => "conv12",
            Scope::AllConvs => "all",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conv1" => Ok(Scope::Conv1),
            "conv12" | "conv1+2" => Ok(Scope::Conv12),
            "all" | "allconvs" | "all_convs" => Ok(Scope::AllConvs),
            _ => Err(config_err!("unknown scope '{s}' (expected conv1, conv12 or all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub scope: Scope,
    /// One rank per compressed layer, in layer order.
    pub ranks: Vec<usize>,
    pub dim_theta: usize,
    pub widths: Widths,
    /// Dictionary-only baseline: mixing tensors are trained directly.
    #[serde(default)]
    pub mixing_trainable: bool,
}

impl CompressionConfig {
    pub fn new(scope: Scope, ranks: Vec<usize>, dim_theta: usize, widths: Widths) -> Result<Self> {
        let cfg = Self { scope, ranks, dim_theta, widths, mixing_trainable: false };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expand a single rank to every compressed layer.
    pub fn uniform(scope: Scope, rank: usize, dim_theta: usize, widths: Widths) -> Result<Self> {
        Self::new(scope, vec![rank; scope.n_layers()], dim_theta, widths)
    }

    pub fn validate(&self) -> Result<()> {
        self.widths.validate()?;
        if self.ranks.len() != self.scope.n_layers() {
            return Err(config_err!(
                "scope {} compresses {} layers but {} ranks were given",
                self.scope.label(),
                self.scope.n_layers(),
                self.ranks.len()
            ));
        }
        if self.ranks.contains(&0) {
            return Err(config_err!("ranks must be positive, got {:?}", self.ranks));
        }
        if self.dim_theta == 0 {
            return Err(config_err!("dim_theta must be positive"));
        }
        Ok(())
    }

    pub fn rank_of(&self, layer: usize) -> Option<usize> {
        self.ranks.get(layer).copied()
    }
}

pub fn dense_conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

pub fn dict_conv_params(c_out: usize, k: usize, rank: usize) -> usize {
    rank * k * k + c_out
}

/// `C_out (C_in k^2 + 1) / (R k^2 + C_out)`.
pub fn layer_cr_conv(c_out: usize, c_in: usize, k: usize, rank: usize) -> f64 {
    dense_conv_params(c_in, c_out, k) as f64 / dict_conv_params(c_out, k, rank) as f64
}

/// `9 c1 c2 + 9 c2 c3 + 26 c1 + c2 + 11 c3 + 10`.
pub fn teacher_params(w: Widths) -> usize {
    9 * w.c1 * w.c2 + 9 * w.c2 * w.c3 + 26 * w.c1 + w.c2 + 11 * w.c3 + 10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub rank: Option<usize>,
    pub teacher: usize,
    pub student: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub scope: Scope,
    pub ranks: Vec<usize>,
    pub dim_theta: usize,
    pub teacher_total: usize,
    pub student_total: usize,
    pub teacher_conv: usize,
    pub student_conv: usize,
    pub cr_overall: f64,
    pub cr_conv: f64,
    pub widths: Widths,
    pub layers: Vec<LayerCount>,
}

pub fn count_params(cfg: &CompressionConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let head = NUM_CLASSES * cfg.widths.c3 + NUM_CLASSES;
    let mut layers = Vec::with_capacity(3);
    for (l, (c_in, c_out, k, _)) in cfg.widths.conv_geometry().into_iter().enumerate() {
        let rank = cfg.rank_of(l);
        let teacher = dense_conv_params(c_in, c_out, k);
        let student = match rank {
            Some(r) => {
                dict_conv_params(c_out, k, r) + if cfg.mixing_trainable { c_out * c_in * r } else { 0 }
            }
            None => teacher,
        };
        layers.push(LayerCount { layer: l + 1, c_in, c_out, k, rank, teacher, student });
    }
    let teacher_conv: usize = layers.iter().map(|l| l.teacher).sum();
    let student_conv: usize = layers.iter().map(|l| l.student).sum();
    let teacher_total = teacher_conv + head;
    let student_total = student_conv + head + cfg.dim_theta;
    let (cr_overall, cr_conv) = compression_ratios_of(teacher_total, student_total, teacher_conv, student_conv);
    Ok(ParamReport {
        scope: cfg.scope,
        ranks: cfg.ranks.clone(),
        dim_theta: cfg.dim_theta,
        teacher_total,
        student_total,
        teacher_conv,
        student_conv,
        cr_overall,
        cr_conv,
        widths: cfg.widths,
        layers,
    })
}

fn compression_ratios_of(tt: usize, st: usize, tc: usize, sc: usize) -> (f64, f64) {
    (tt as f64 / st as f64, tc as f64 / sc as f64)
}

/// `(CR_overall, CR_conv)`; the overall ratio counts `dim(theta)` once.
pub fn compression_ratios(report: &ParamReport) -> (f64, f64) {
    compression_ratios_of(
        report.teacher_total,
        report.student_total,
        report.teacher_conv,
        report.student_conv,
    )
}
