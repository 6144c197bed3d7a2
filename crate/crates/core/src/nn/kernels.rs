//! Slice-level numerical kernels shared by the autodiff graph and the
//! free-standing layer functions.

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 square-kernel convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold `x` (`[B, C, H, W]`) into a `[C*k*k, B*H'*W']` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for y in 0..oh {
                        let iy = y as isize + ki as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[(b * oh + y) * ow..][..ow];
                        for (xo, d) in drow.iter_mut().enumerate() {
                            let ix = xo as isize + kj as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back into `dx`.
pub fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for y in 0..oh {
                        let iy = y as isize + ki as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[(b * oh + y) * ow..][..ow];
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        for (xo, s) in srow.iter().enumerate() {
                            let ix = xo as isize + kj as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns `(output [B, C_out, H', W'], patch matrix)`.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let ncols = g.col_cols();
    let mut tmp = vec![0.0; g.c_out * ncols];
    gemm(
        g.c_out,
        g.col_rows(),
        ncols,
        weight,
        false,
        &cols,
        false,
        0.0,
        &mut tmp,
    );
    let hw = g.out_h() * g.out_w();
    let mut out = vec![0.0; g.batch * g.c_out * hw];
    for o in 0..g.c_out {
        let bo = bias.map_or(0.0, |b| b[o]);
        for b in 0..g.batch {
            let src = &tmp[o * ncols + b * hw..][..hw];
            let dst = &mut out[(b * g.c_out + o) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution given the upstream gradient `dy`.
///
/// Each output is only computed when the matching `want_*` flag is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dy: &[f64],
    cols: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = g.out_h() * g.out_w();
    let ncols = g.col_cols();
    // [B, C_out, HW] -> [C_out, B*HW]
    let mut dt = vec![0.0; g.c_out * ncols];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            dt[o * ncols + b * hw..][..hw].copy_from_slice(&dy[(b * g.c_out + o) * hw..][..hw]);
        }
    }
    let db = want_db.then(|| {
        (0..g.c_out)
            .map(|o| dt[o * ncols..(o + 1) * ncols].iter().sum())
            .collect()
    });
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; g.c_out * g.col_rows()];
        gemm(g.c_out, ncols, g.col_rows(), &dt, false, cols, true, 0.0, &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; g.col_rows() * ncols];
        gemm(
            g.col_rows(),
            g.c_out,
            ncols,
            weight,
            true,
            &dt,
            false,
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// 2x2/stride-2 max pool over `[planes, h, w]`; returns output and argmax
/// (flat input index per output cell). Odd trailing rows/cols are dropped.
pub fn maxpool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Row-wise log-softmax of a `[rows, cols]` matrix, log-sum-exp stabilised.
pub fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    log_softmax_rows(x, cols).into_iter().map(f64::exp).collect()
}
