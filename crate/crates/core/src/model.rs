//! Teacher and student CNNs sharing one three-block layout.
//!
//! conv1 (5x5, pad 2) -> ReLU -> 2x2 pool -> conv2 (3x3, pad 1) -> ReLU ->
//! pool -> conv3 (3x3, pad 1) -> ReLU -> dropout -> global average pool ->
//! linear head. A student replaces the first one, two or three convolutions
//! with dictionary convolutions.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dictconv::{generate_mixing, make_projection, CompressionConfig, DictConvLayer, Widths, NUM_CLASSES};
use crate::error::{config_err, Result};
use crate::nn::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::rng;

pub const DEFAULT_DROPOUT: f64 = 0.25;

#[derive(Clone, Debug)]
pub enum ConvBlock {
    Dense { weight: ParamId, bias: ParamId, padding: usize },
    Dict(DictConvLayer),
    /// Dictionary layer whose mixing tensor is itself trainable.
    DictTrainable { layer: DictConvLayer, mixing: ParamId },
}

impl ConvBlock {
    pub fn is_conditioned(&self) -> bool {
        matches!(self, ConvBlock::Dict(_))
    }

    pub fn dict_layer(&self) -> Option<&DictConvLayer> {
        match self {
            ConvBlock::Dict(l) | ConvBlock::DictTrainable { layer: l, .. } => Some(l),
            ConvBlock::Dense { .. } => None,
        }
    }
}

/// Which variant of the student to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// `M = A z` from the conditioning feature.
    Generated,
    /// `M` is a trainable tensor initialised from `A z_init`.
    Trainable,
}

#[derive(Clone, Debug)]
pub struct Cnn {
    pub widths: Widths,
    pub compression: Option<CompressionConfig>,
    pub blocks: Vec<ConvBlock>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub params: ParamSet,
    pub dropout: f64,
    /// Length of the conditioning vector the projections expect.
    pub feature_dim: usize,
}

fn he_normal<R: Rng>(t: &mut Tensor, fan_in: usize, gain: f64, rng: &mut R) {
    let std = (gain / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}

impl Cnn {
    /// Dense teacher with He-normal convolutions and zero biases.
    pub fn teacher(widths: Widths, seed: u64) -> Result<Self> {
        widths.validate()?;
        let mut r = rng::stream(seed, rng::INIT, 0);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(3);
        for (l, (c_in, c_out, k, pad)) in widths.conv_geometry().into_iter().enumerate() {
            blocks.push(dense_block(&mut params, l, c_in, c_out, k, pad, &mut r));
        }
        let (head_weight, head_bias) = head(&mut params, widths.c3, &mut r);
        Ok(Self {
            widths,
            compression: None,
            blocks,
            head_weight,
            head_bias,
            params,
            dropout: DEFAULT_DROPOUT,
            feature_dim: 0,
        })
    }

    /// Student with the first `scope` convolutions compressed. Projection for
    /// layer `l` uses seed `derive_seed(seed, "projection", l)`. Bases are
    /// initialised by [`Cnn::calibrate_bases`], not here.
    pub fn student(cfg: &CompressionConfig, feature_dim: usize, seed: u64, mode: MixingMode, z_init: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if z_init.len() != feature_dim {
            return Err(config_err!("initial feature has {} entries, expected {feature_dim}", z_init.len()));
        }
        let mut r = rng::stream(seed, rng::INIT, 0);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(3);
        for (l, (c_in, c_out, k, pad)) in cfg.widths.conv_geometry().into_iter().enumerate() {
            let block = match cfg.rank_of(l) {
                None => dense_block(&mut params, l, c_in, c_out, k, pad, &mut r),
                Some(rank) => {
                    let a = make_projection(rng::derive_seed(seed, rng::PROJECTION, l as u64), c_out * c_in * rank, feature_dim)?;
                    let layer = DictConvLayer::new(&mut params, &format!("conv{}", l + 1), c_in, c_out, k, rank, pad, Arc::new(a))?;
                    match mode {
                        MixingMode::Generated => ConvBlock::Dict(layer),
                        MixingMode::Trainable => {
                            let m0 = layer.mixing(z_init)?;
                            let mixing = params.add(format!("conv{}.mixing", l + 1), m0);
                            ConvBlock::DictTrainable { layer, mixing }
                        }
                    }
                }
            };
            blocks.push(block);
        }
        let (head_weight, head_bias) = head(&mut params, cfg.widths.c3, &mut r);
        let mut net = Self {
            widths: cfg.widths,
            compression: Some(CompressionConfig {
                mixing_trainable: mode == MixingMode::Trainable,
                ..cfg.clone()
            }),
            blocks,
            head_weight,
            head_bias,
            params,
            dropout: DEFAULT_DROPOUT,
            feature_dim,
        };
        net.calibrate_bases(z_init, &mut r)?;
        Ok(net)
    }

    /// Draw each basis from `N(0, 2 / (C_in k^2 R))` divided by the mean
    /// square of the mixing generated by `z`, so reconstructed kernels start
    /// near He scale whatever the magnitude of the feature.
    pub fn calibrate_bases<R: Rng>(&mut self, z: &[f64], rng: &mut R) -> Result<()> {
        for block in &self.blocks {
            if let Some(layer) = block.dict_layer() {
                let m = layer.mixing(z)?;
                let ms = m.data().iter().map(|v| v * v).sum::<f64>() / m.numel() as f64;
                let scale = if ms > 0.0 { 1.0 / ms } else { 1.0 };
                layer.init_basis(&mut self.params, scale, rng);
            }
        }
        Ok(())
    }

    /// Mixing tensors for every feature-conditioned layer (None elsewhere).
    pub fn mixings(&self, z: &[f64]) -> Result<Vec<Option<Tensor>>> {
        self.blocks
            .iter()
            .map(|b| match b {
                ConvBlock::Dict(l) => generate_mixing(&l.projection, z, l.c_out, l.c_in, l.rank).map(Some),
                _ => Ok(None),
            })
            .collect()
    }

    pub fn needs_feature(&self) -> bool {
        self.blocks.iter().any(ConvBlock::is_conditioned)
    }

    /// Trainable scalar count (basis, biases, dense kernels, head, and
    /// mixing tensors when they are trainable).
    pub fn trainable_count(&self) -> usize {
        self.params.count()
    }

    /// Record the network on `g` and return `[B, 10]` logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mixings: &[Option<Tensor>],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for (l, block) in self.blocks.iter().enumerate() {
            h = match block {
                ConvBlock::Dense { weight, bias, padding } => {
                    let w = g.param(&self.params, *weight, train);
                    let b = g.param(&self.params, *bias, train);
                    g.conv2d(h, w, Some(b), *padding)?
                }
                ConvBlock::Dict(layer) => {
                    let m = mixings
                        .get(l)
                        .and_then(Option::as_ref)
                        .ok_or_else(|| config_err!("missing mixing tensor for conditioned layer conv{}", l + 1))?;
                    layer.forward(g, &self.params, h, m, train)?
                }
                ConvBlock::DictTrainable { layer, mixing } => {
                    let m = g.param(&self.params, *mixing, train);
                    layer.forward_with_mixing_var(g, &self.params, h, m, train)?
                }
            };
            h = g.relu(h);
            if l < 2 {
                h = g.maxpool2x2(h)?;
            }
        }
        h = g.dropout(h, self.dropout, rng, train)?;
        h = g.global_avg_pool(h)?;
        let w = g.param(&self.params, self.head_weight, train);
        let b = g.param(&self.params, self.head_bias, train);
        g.linear(h, w, Some(b))
    }

    /// Evaluation-mode logits for a `[n, 1, H, W]` image stack, in chunks.
    pub fn logits(&self, images: &Tensor, mixings: &[Option<Tensor>], chunk: usize) -> Result<Vec<f64>> {
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(n * NUM_CLASSES);
        // dropout is inactive in evaluation mode, so this stream is never drawn
        let mut no_rng = rng::stream(0, rng::DROPOUT, 0);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = self.forward(&mut g, xv, mixings, false, &mut no_rng)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }
}

fn dense_block<R: Rng>(params: &mut ParamSet, l: usize, c_in: usize, c_out: usize, k: usize, padding: usize, rng: &mut R) -> ConvBlock {
    let mut w = Tensor::zeros(&[c_out, c_in, k, k]);
    he_normal(&mut w, c_in * k * k, 2.0, rng);
    let weight = params.add(format!("conv{}.weight", l + 1), w);
    let bias = params.add(format!("conv{}.bias", l + 1), Tensor::zeros(&[c_out]));
    ConvBlock::Dense { weight, bias, padding }
}

fn head<R: Rng>(params: &mut ParamSet, c3: usize, rng: &mut R) -> (ParamId, ParamId) {
    let mut w = Tensor::zeros(&[NUM_CLASSES, c3]);
    he_normal(&mut w, c3, 1.0, rng);
    (
        params.add("fc.weight", w),
        params.add("fc.bias", Tensor::zeros(&[NUM_CLASSES])),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictconv::{count_params, teacher_params, Scope};

    #[test]
    fn teacher_count_matches_closed_form() {
        for w in [Widths::new(32, 64, 128), Widths::new(4, 6, 8)] {
            assert_eq!(Cnn::teacher(w, 0).unwrap().trainable_count(), teacher_params(w));
        }
    }

    #[test]
    fn student_count_matches_accounting() {
        let w = Widths::new(4, 6, 8);
        for scope in [Scope::Conv1, Scope::Conv12, Scope::AllConvs] {
            let cfg = CompressionConfig::uniform(scope, 3, 15, w).unwrap();
            let z = vec![0.5; 16];
            let s = Cnn::student(&cfg, 16, 1, MixingMode::Generated, &z).unwrap();
            let report = count_params(&cfg).unwrap();
            assert_eq!(s.trainable_count() + cfg.dim_theta, report.student_total);
            let d = Cnn::student(&cfg, 16, 1, MixingMode::Trainable, &z).unwrap();
            let mut dcfg = cfg.clone();
            dcfg.mixing_trainable = true;
            assert_eq!(d.trainable_count() + cfg.dim_theta, count_params(&dcfg).unwrap().student_total);
        }
    }

    #[test]
    fn logits_shape_and_zero_feature() {
        let w = Widths::new(4, 6, 8);
        let cfg = CompressionConfig::uniform(Scope::AllConvs, 2, 15, w).unwrap();
        let s = Cnn::student(&cfg, 16, 3, MixingMode::Generated, &[1.0; 16]).unwrap();
        let x = Tensor::full(&[3, 1, 28, 28], 0.5);
        let out = s.logits(&x, &s.mixings(&[1.0; 16]).unwrap(), 2).unwrap();
        assert_eq!(out.len(), 30);
        // z = 0 zeroes every kernel, so the logits collapse to the head bias
        let zero = s.logits(&x, &s.mixings(&[0.0; 16]).unwrap(), 2).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(s.logits(&x, &[None, None, None], 2).is_err());
    }
}
