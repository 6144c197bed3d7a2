//! Value-level layer functions (no gradient recording).
//!
//! These mirror the graph ops in [`super::Graph`] and are convenient for
//! inference and for tests that only need forward values.

use rand::Rng;

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Stride-1 cross-correlation. Accepts `x` as `[C_in, H, W]` or
/// `[B, C_in, H, W]`; the output has the same rank.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
    let unbatched = x.shape().len() == 3;
    let xb = if unbatched {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        x.clone().reshape(&s)?
    } else {
        x.clone()
    };
    let mut g = Graph::new();
    let xv = g.constant(xb);
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.conv2d(xv, wv, Some(bv), padding)?;
    let out = g.value(y).clone();
    if unbatched {
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    } else {
        Ok(out)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
        .expect("same shape")
}

fn with_graph(x: &Tensor, f: impl FnOnce(&mut Graph, super::Var) -> Result<super::Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

pub fn maxpool2x2(x: &Tensor) -> Result<Tensor> {
    with_graph(x, |g, v| g.maxpool2x2(v))
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    with_graph(x, |g, v| g.global_avg_pool(v))
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.linear(xv, wv, Some(bv))?;
    Ok(g.value(y).clone())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, rng: &mut R, train: bool) -> Result<Tensor> {
    with_graph(x, |g, v| g.dropout(v, p, rng, train))
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(config_err!("log_softmax expects [B,C], got {:?}", x.shape()));
    }
    with_graph(x, |g, v| g.log_softmax(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct six-loop cross-correlation.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Vec<f64> {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = b.data()[o];
                    for i in 0..ci {
                        for a in 0..k {
                            for bb in 0..k {
                                let iy = y as isize + a as isize - pad as isize;
                                let ix = xo as isize + bb as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((o * ci + i) * k + a) * k + bb]
                                        * x.data()[(i * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xo] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        for seed in 0..5 {
            let x = randn(&[1, 3, 3], seed);
            let w = randn(&[2, 1, 3, 3], seed + 100);
            let b = randn(&[2], seed + 200);
            let y = conv2d(&x, &w, &b, 1).unwrap();
            assert_eq!(y.shape(), &[2, 3, 3]);
            for (a, r) in y.data().iter().zip(conv_reference(&x, &w, &b, 1)) {
                assert!((a - r).abs() < 1e-12);
            }
        }
        let x = randn(&[3, 7, 6], 9);
        let w = randn(&[4, 3, 5, 5], 10);
        let b = randn(&[4], 11);
        let y = conv2d(&x, &w, &b, 2).unwrap();
        for (a, r) in y.data().iter().zip(conv_reference(&x, &w, &b, 2)) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_of_zero_input_is_zero() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let y = conv2d(&x, &randn(&[3, 2, 3, 3], 1), &Tensor::zeros(&[3]), 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_permutation_kernel_permutes_channels() {
        let x = randn(&[3, 4, 4], 2);
        // output o reads input perm[o]
        let perm = [2usize, 0, 1];
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| f64::from(u8::from(perm[i / 3] == i % 3)));
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 0).unwrap();
        for (o, &src) in perm.iter().enumerate() {
            assert_eq!(&y.data()[o * 16..(o + 1) * 16], &x.data()[src * 16..(src + 1) * 16]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let err = conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3]), &Tensor::zeros(&[3]), 1).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        assert!(err.to_string().contains("[1, 2, 5, 5]"));
    }

    #[test]
    fn relu_examples() {
        let y = relu(&Tensor::new(vec![2], vec![-1.5, 2.0]).unwrap());
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn gap_of_constant_channel() {
        let x = Tensor::full(&[1, 2, 7, 7], 0.625);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert!(y.data().iter().all(|&v| (v - 0.625).abs() < 1e-15));
    }

    #[test]
    fn maxpool_example() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn dropout_probability_validated_and_eval_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = randn(&[4, 4], 3);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
        assert!(dropout(&x, -0.1, &mut rng, true).is_err());
        assert_eq!(dropout(&x, 0.25, &mut rng, false).unwrap(), x);
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let x = Tensor::full(&[n], 1.0);
        let y = dropout(&x, 0.25, &mut rng, true).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        // per-element variance p/(1-p) = 1/3
        let sd = (1.0f64 / 3.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let y = log_softmax(&randn(&[3, 5], 4)).unwrap();
        for row in y.data().chunks(5) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.5, -1.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, 0.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[2.25, 5.0]);
    }
}
