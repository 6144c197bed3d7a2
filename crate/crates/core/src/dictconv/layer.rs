//! Photonic-conditioned dictionary convolution.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Error, Result};
use crate::nn::{Graph, ParamId, ParamSet, Tensor, Var};

/// Dense `rows x d` matrix with i.i.d. `N(0, 1/d)` entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub rows: usize,
    pub d: usize,
    pub seed: u64,
    data: Vec<f64>,
}

/// Draw a projection from `seed`; same seed, same matrix.
pub fn make_projection(seed: u64, rows: usize, d: usize) -> Result<Projection> {
    if rows == 0 || d == 0 {
        return Err(config_err!("projection needs rows, d >= 1 (got {rows} x {d})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let data = (0..rows * d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Projection { rows, d, seed, data })
}

impl Projection {
    pub fn from_data(rows: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * d {
            return Err(config_err!("projection data has {} entries, expected {rows} x {d}", data.len()));
        }
        Ok(Self { rows, d, seed: 0, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.d..(r + 1) * self.d]
    }

    pub fn matvec(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(config_err!(
                "conditioning vector has {} entries, projection expects {}",
                z.len(),
                self.d
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(z).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.d, &self.data)
    }

    /// Largest singular value by power iteration on `A^T A`.
    pub fn spectral_norm(&self) -> f64 {
        let mut v = vec![1.0 / (self.d as f64).sqrt(); self.d];
        // break symmetry with a fixed deterministic tilt
        for (i, x) in v.iter_mut().enumerate() {
            *x *= 1.0 + 1e-3 * ((i * 7919) % 13) as f64;
        }
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let w = self.matvec_t(&self.matvec(&v).unwrap());
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v = w.iter().map(|x| x / norm).collect();
            let converged = (norm - lambda).abs() <= 1e-14 * norm;
            lambda = norm;
            if converged {
                break;
            }
        }
        lambda.sqrt()
    }
}

/// `vec(M) = A z`, reshaped to `[C_out, C_in, R]` with output channel slowest
/// and rank fastest.
pub fn generate_mixing(a: &Projection, z: &[f64], c_out: usize, c_in: usize, rank: usize) -> Result<Tensor> {
    if a.rows != c_out * c_in * rank {
        return Err(config_err!(
            "projection has {} rows, mixing [{c_out}, {c_in}, {rank}] needs {}",
            a.rows,
            c_out * c_in * rank
        ));
    }
    Tensor::new(vec![c_out, c_in, rank], a.matvec(z)?)
}

/// `W[o,i,:,:] = sum_r M[o,i,r] B[r,:,:]`.
pub fn reconstruct_kernel(mixing: &Tensor, basis: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let m = g.constant(mixing.clone());
    let b = g.constant(basis.clone());
    let w = g.mix_kernel(m, b)?;
    Ok(g.value(w).clone())
}

/// Geometry and fixed projection of one dictionary convolution. The basis
/// and bias live in a [`ParamSet`]; the projection is never trained.
#[derive(Clone, Debug)]
pub struct DictConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub rank: usize,
    pub padding: usize,
    pub projection: Arc<Projection>,
    pub basis: ParamId,
    pub bias: ParamId,
}

impl DictConvLayer {
    /// Register zero-initialised basis `[R, k, k]` and bias `[C_out]` under `name`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rank: usize,
        padding: usize,
        projection: Arc<Projection>,
    ) -> Result<Self> {
        if k % 2 == 0 || rank == 0 || c_in == 0 || c_out == 0 {
            return Err(config_err!(
                "invalid dictionary layer {name}: c_in={c_in} c_out={c_out} k={k} rank={rank}"
            ));
        }
        if projection.rows != c_out * c_in * rank {
            return Err(config_err!(
                "projection for {name} has {} rows, expected {}",
                projection.rows,
                c_out * c_in * rank
            ));
        }
        let basis = params.add(format!("{name}.basis"), Tensor::zeros(&[rank, k, k]));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Ok(Self { c_in, c_out, k, rank, padding, projection, basis, bias })
    }

    /// `R k^2 + C_out`.
    pub fn trainable_count(&self) -> usize {
        self.rank * self.k * self.k + self.c_out
    }

    pub fn mixing(&self, z: &[f64]) -> Result<Tensor> {
        generate_mixing(&self.projection, z, self.c_out, self.c_in, self.rank)
    }

    /// Fill the basis with `N(0, scale * 2 / (C_in k^2 R))` entries.
    pub fn init_basis<R: Rng>(&self, params: &mut ParamSet, scale: f64, rng: &mut R) {
        let std = (scale * 2.0 / (self.c_in * self.k * self.k * self.rank) as f64).sqrt();
        for v in params.get_mut(self.basis).data_mut() {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// Record the layer on `g` with a precomputed mixing tensor. The mixing
    /// enters as a constant, so only basis and bias receive gradients.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var, mixing: &Tensor, track: bool) -> Result<Var> {
        let m = g.constant(mixing.clone());
        self.forward_with_mixing_var(g, params, x, m, track)
    }

    pub fn forward_with_mixing_var(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        mixing: Var,
        track: bool,
    ) -> Result<Var> {
        let b = g.param(params, self.basis, track);
        let w = g.mix_kernel(mixing, b)?;
        let bias = g.param(params, self.bias, track);
        g.conv2d(x, w, Some(bias), self.padding)
    }
}

/// Value-level `conv2d(x, reconstruct_kernel(A z, B), bias)`.
pub fn dictconv_forward(x: &Tensor, layer: &DictConvLayer, params: &ParamSet, z: &[f64]) -> Result<Tensor> {
    let w = reconstruct_kernel(&layer.mixing(z)?, params.get(layer.basis))?;
    crate::nn::layers::conv2d(x, &w, params.get(layer.bias), layer.padding)
}

/// Least-squares conditioning vector for a target mixing: solves the normal
/// equations `A^T A z = A^T m` by Cholesky after a conditioning check.
pub fn project_mixing(a: &Projection, m_star: &[f64]) -> Result<(Vec<f64>, f64)> {
    if m_star.len() != a.rows {
        return Err(config_err!(
            "target mixing has {} entries, projection has {} rows",
            m_star.len(),
            a.rows
        ));
    }
    let am = a.to_matrix();
    let gram = am.transpose() * &am;
    let eig = gram.clone().symmetric_eigenvalues();
    let lmax = eig.max();
    let lmin = eig.min();
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(cond < 1e12) {
        return Err(Error::Numerical(format!(
            "projection is rank deficient or ill-conditioned ({} x {}, condition estimate {cond:.3e})",
            a.rows, a.d
        )));
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical(format!("Cholesky failed (condition estimate {cond:.3e})"))
    })?;
    let m = DVector::from_column_slice(m_star);
    let z = chol.solve(&(am.transpose() * &m));
    let residual = (m - &am * &z).norm();
    Ok((z.as_slice().to_vec(), residual))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn projection_moments_and_determinism() {
        let a = make_projection(5, 10_000, 512).unwrap();
        let n = a.data().len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var * 512.0 - 1.0).abs() < 0.1);
        assert_eq!(make_projection(5, 10_000, 512).unwrap(), a);
    }

    #[test]
    fn mixing_examples() {
        let a = make_projection(1, 2 * 3 * 2, 7).unwrap();
        assert!(generate_mixing(&a, &[0.0; 7], 2, 3, 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(generate_mixing(&a, &[0.0; 6], 2, 3, 2), Err(Error::Config(_))));
        assert!(matches!(generate_mixing(&a, &[0.0; 7], 2, 2, 2), Err(Error::Config(_))));

        let mut eye = vec![0.0; 12 * 12];
        for i in 0..12 {
            eye[i * 12 + i] = 1.0;
        }
        let id = Projection::from_data(12, 12, eye).unwrap();
        let mut e = vec![0.0; 12];
        e[7] = 1.0;
        let m = generate_mixing(&id, &e, 2, 3, 2).unwrap();
        // slot 7 = (o=1, i=0, r=1)
        let mut want = vec![0.0; 12];
        want[7] = 1.0;
        assert_eq!(m.data(), &want[..]);
    }

    #[test]
    fn mixing_matches_row_dot_products() {
        let a = make_projection(2, 3 * 2 * 4, 16).unwrap();
        let z = randn(16, 3);
        let m = generate_mixing(&a, &z, 3, 2, 4).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                for r in 0..4 {
                    let row = (o * 2 + i) * 4 + r;
                    let dot: f64 = (0..16).map(|j| a.data()[row * 16 + j] * z[j]).sum();
                    assert!((m.data()[row] - dot).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reconstruct_examples() {
        let basis = Tensor::new(vec![1, 3, 3], randn(9, 4)).unwrap();
        let w = reconstruct_kernel(&Tensor::full(&[2, 2, 1], 1.0), &basis).unwrap();
        for pair in w.data().chunks(9) {
            assert_eq!(pair, basis.data());
        }
        let zero = reconstruct_kernel(&Tensor::zeros(&[2, 2, 1]), &basis).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_matches_nested_loops() {
        let m = Tensor::new(vec![2, 2, 2], randn(8, 5)).unwrap();
        let b = Tensor::new(vec![2, 3, 3], randn(18, 6)).unwrap();
        let w = reconstruct_kernel(&m, &b).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                for al in 0..3 {
                    for be in 0..3 {
                        let mut s = 0.0;
                        for r in 0..2 {
                            s += m.data()[(o * 2 + i) * 2 + r] * b.data()[(r * 3 + al) * 3 + be];
                        }
                        assert!((w.data()[((o * 2 + i) * 3 + al) * 3 + be] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn layer(params: &mut ParamSet) -> DictConvLayer {
        let a = Arc::new(make_projection(9, 3 * 2 * 2, 10).unwrap());
        let l = DictConvLayer::new(params, "d", 2, 3, 3, 2, 1, a).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        l.init_basis(params, 1.0, &mut r);
        params.get_mut(l.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        l
    }

    #[test]
    fn zero_feature_outputs_bias() {
        let mut p = ParamSet::new();
        let l = layer(&mut p);
        assert_eq!(l.trainable_count(), 2 * 9 + 3);
        let x = Tensor::new(vec![1, 2, 4, 4], randn(32, 2)).unwrap();
        let y = dictconv_forward(&x, &l, &p, &[0.0; 10]).unwrap();
        for (c, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.1, -0.2, 0.3][c]));
        }
    }

    #[test]
    fn forward_equals_composition() {
        let mut p = ParamSet::new();
        let l = layer(&mut p);
        let x = Tensor::new(vec![2, 2, 5, 5], randn(100, 2)).unwrap();
        let z = randn(10, 8);
        let y = dictconv_forward(&x, &l, &p, &z).unwrap();
        let w = reconstruct_kernel(&generate_mixing(&l.projection, &z, 3, 2, 2).unwrap(), p.get(l.basis)).unwrap();
        let want = crate::nn::layers::conv2d(&x, &w, p.get(l.bias), 1).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn only_basis_and_bias_receive_gradients() {
        let mut p = ParamSet::new();
        let l = layer(&mut p);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 4, 4], randn(32, 2)).unwrap());
        let y = l.forward(&mut g, &p, x, &l.mixing(&randn(10, 3)).unwrap(), true).unwrap();
        let loss = g.sum_squares(y);
        g.backward_into(loss, &mut p).unwrap();
        assert_eq!(p.with_grad(), vec!["d.basis", "d.bias"]);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let a = make_projection(3, 40, 12).unwrap();
        let svd = a.to_matrix().svd(false, false);
        let want = svd.singular_values.max();
        assert!((a.spectral_norm() - want).abs() < 1e-6);
    }

    #[test]
    fn projection_membership_and_idempotence() {
        let a = make_projection(4, 60, 8).unwrap();
        let z0 = randn(8, 1);
        let (z, res) = project_mixing(&a, &a.matvec(&z0).unwrap()).unwrap();
        assert!(res < 1e-9);
        for (u, v) in z.iter().zip(&z0) {
            assert!((u - v).abs() < 1e-9);
        }
        let m = randn(60, 2);
        let (z1, _) = project_mixing(&a, &m).unwrap();
        let pm = a.matvec(&z1).unwrap();
        let (z2, _) = project_mixing(&a, &pm).unwrap();
        let ppm = a.matvec(&z2).unwrap();
        for (u, v) in pm.iter().zip(&ppm) {
            assert!((u - v).abs() < 1e-9);
        }
        // residual orthogonal to every column
        let r: Vec<f64> = m.iter().zip(&pm).map(|(a, b)| a - b).collect();
        let at_r = a.to_matrix().transpose() * DVector::from_column_slice(&r);
        assert!(at_r.amax() < 1e-8);
    }

    #[test]
    fn projection_matches_svd_least_squares() {
        let a = make_projection(6, 30, 6).unwrap();
        let m = randn(30, 7);
        let (z, _) = project_mixing(&a, &m).unwrap();
        let svd = a.to_matrix().svd(true, true);
        let want = svd.solve(&DVector::from_column_slice(&m), 1e-12).unwrap();
        for (u, v) in z.iter().zip(want.iter()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_projection_is_rejected() {
        let a = make_projection(6, 5, 8).unwrap();
        assert!(matches!(project_mixing(&a, &[0.0; 5]), Err(Error::Numerical(_))));
    }
}
