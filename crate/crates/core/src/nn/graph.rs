//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward computation. Leaves are either constants or
//! copies of parameters from a [`ParamSet`]; after [`Graph::backward`] the
//! gradient of every recorded node is available and parameter gradients can
//! be accumulated back into the set.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{config_err, usage_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        area: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LogSoftmax(Var),
    MixKernel {
        mixing: Var,
        basis: Var,
        pairs: usize,
        rank: usize,
        area: usize,
    },
    Add(Var, Var),
    Sum(Var),
    SumSquares(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    /// Scalar computed outside the graph with a known gradient wrt `x`.
    External {
        x: Var,
        dx: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass wrt `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter set.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding a copy of parameter `id`. With `track` false it behaves
    /// as a constant, which keeps evaluation-only passes cheap.
    pub fn param(&mut self, params: &ParamSet, id: ParamId, track: bool) -> Var {
        let mut value = params.get(id).clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, track);
        if track {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(config_err!(
                "conv2d expects x [B,C,H,W] and w [O,C,k,k], got {:?} and {:?}",
                xs,
                ws
            ));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(config_err!(
                "conv2d channel/kernel mismatch: x {:?}, w {:?} (kernel must be odd and square)",
                xs,
                ws
            ));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(config_err!("conv2d kernel {} larger than padded input {:?}", ws[2], xs));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(config_err!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    ws[0]
                ));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(config_err!("maxpool2x2 expects [B,C,H>=2,W>=2], got {:?}", s));
        }
        let (out, argmax) = kernels::maxpool2x2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(config_err!("global_avg_pool expects [B,C,H,W], got {:?}", s));
        }
        let area = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x, area }, rg))
    }

    /// `y = x W^T + b` with `x [B, in]`, `W [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(config_err!("linear shape mismatch: x {:?}, w {:?}", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(config_err!("linear bias {:?} vs out {}", self.shape(b), ws[0]));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Inverted dropout. Identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability {p} outside [0,1)"));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.dropout_with_mask(x, mask))
    }

    /// Dropout with an explicit multiplicative mask (used by gradient checks).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(mask.len(), t.numel());
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(config_err!("log_softmax expects [B,C], got {:?}", s));
        }
        let out = kernels::log_softmax_rows(self.value(x).data(), s[1]);
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Dictionary kernel: `W[o,i,:,:] = sum_r M[o,i,r] B[r,:,:]`.
    ///
    /// `mixing` is `[C_out, C_in, R]`, `basis` is `[R, k, k]`; output is
    /// `[C_out, C_in, k, k]`.
    pub fn mix_kernel(&mut self, mixing: Var, basis: Var) -> Result<Var> {
        let ms = self.shape(mixing).to_vec();
        let bs = self.shape(basis).to_vec();
        if ms.len() != 3 || bs.len() != 3 || ms[2] != bs[0] {
            return Err(config_err!(
                "mix_kernel rank mismatch: mixing {:?}, basis {:?}",
                ms,
                bs
            ));
        }
        let pairs = ms[0] * ms[1];
        let rank = ms[2];
        let area = bs[1] * bs[2];
        let mut out = vec![0.0; pairs * area];
        kernels::gemm(
            pairs,
            rank,
            area,
            self.value(mixing).data(),
            false,
            self.value(basis).data(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![ms[0], ms[1], bs[1], bs[2]], out)?;
        let rg = self.rg(mixing) || self.rg(basis);
        Ok(self.push(
            value,
            Op::MixKernel {
                mixing,
                basis,
                pairs,
                rank,
                area,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!("add shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `sum_i weights_i * x_i`, a generic scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        assert_eq!(weights.len(), self.value(x).numel());
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg)
    }

    /// Attach a scalar whose value and gradient wrt `x` were computed
    /// elsewhere (loss functions live outside the graph).
    pub fn external_scalar(&mut self, x: Var, value: f64, dx: Vec<f64>) -> Var {
        assert_eq!(dx.len(), self.value(x).numel());
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::External { x, dx }, rg)
    }

    /// Reverse sweep from the scalar `loss`. Gradients of earlier passes on
    /// this graph are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(usage_err!(
                "backward called on non-scalar node with shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, g: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    gy,
                    cols,
                    nodes[w.0].value.data(),
                    geom,
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                    b.is_some_and(|b| nodes[b.0].requires_grad),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                let g = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![0.0; nodes[x.0].value.numel()];
                for (gv, &src) in gy.iter().zip(argmax) {
                    g[src] += gv;
                }
                acc(*x, g);
            }
            Op::GlobalAvgPool { x, area } => {
                let inv = 1.0 / *area as f64;
                let g = gy
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(gv * inv, *area))
                    .collect();
                acc(*x, g);
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = nodes[w.0].value.shape()[0];
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(n, dout, din, gy, false, nodes[w.0].value.data(), false, 0.0, &mut dx);
                    acc(*x, dx);
                }
                if nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(dout, n, din, gy, true, nodes[x.0].value.data(), false, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gy.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    acc(*b, db);
                }
            }
            Op::Dropout { x, mask } => {
                acc(*x, gy.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::LogSoftmax(x) => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.shape()[1];
                let mut g = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(gy.chunks(cols)) {
                    let s: f64 = gr.iter().sum();
                    g.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * s));
                }
                acc(*x, g);
            }
            Op::MixKernel {
                mixing,
                basis,
                pairs,
                rank,
                area,
            } => {
                if nodes[mixing.0].requires_grad {
                    let mut dm = vec![0.0; pairs * rank];
                    kernels::gemm(*pairs, *area, *rank, gy, false, nodes[basis.0].value.data(), true, 0.0, &mut dm);
                    acc(*mixing, dm);
                }
                if nodes[basis.0].requires_grad {
                    let mut db = vec![0.0; rank * area];
                    kernels::gemm(*rank, *pairs, *area, nodes[mixing.0].value.data(), true, gy, false, 0.0, &mut db);
                    acc(*basis, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sum(x) => acc(*x, vec![gy[0]; nodes[x.0].value.numel()]),
            Op::SumSquares(x) => {
                acc(*x, nodes[x.0].value.data().iter().map(|v| 2.0 * v * gy[0]).collect());
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|w| w * gy[0]).collect());
            }
            Op::External { x, dx } => acc(*x, dx.iter().map(|d| d * gy[0]).collect()),
        }
    }

    /// Add the gradients of parameter leaves into `params` (accumulating).
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                params
                    .get_mut(id)
                    .grad_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Convenience: [`Graph::backward`] followed by [`Graph::accumulate_into`].
    pub fn backward_into(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_into(params);
        Ok(())
    }
}
