//! Matrix permanents for indistinguishable-photon amplitudes.

use num_complex::Complex64;

/// Ryser's formula with Gray-code subset enumeration, `O(2^n n)`.
///
/// `a` is row-major `n x n`. The permanent of the empty matrix is 1.
pub fn permanent(a: &[Complex64], n: usize) -> Complex64 {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Complex64::new(1.0, 0.0);
    }
    // row_sums[i] = sum over columns in the current subset of a[i][j]
    let mut row_sums = vec![Complex64::new(0.0, 0.0); n];
    let mut total = Complex64::new(0.0, 0.0);
    let mut gray: u64 = 0;
    for k in 1u64..(1u64 << n) {
        let next = k ^ (k >> 1);
        let changed = (gray ^ next).trailing_zeros() as usize;
        let added = next & (1 << changed) != 0;
        for (i, rs) in row_sums.iter_mut().enumerate() {
            let v = a[i * n + changed];
            if added {
                *rs += v;
            } else {
                *rs -= v;
            }
        }
        gray = next;
        let prod = row_sums.iter().fold(Complex64::new(1.0, 0.0), |p, r| p * r);
        let size = next.count_ones() as usize;
        if (n - size) % 2 == 0 {
            total += prod;
        } else {
            total -= prod;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Permutation-sum definition, `O(n! n)`.
    fn permanent_naive(a: &[Complex64], n: usize) -> Complex64 {
        fn rec(a: &[Complex64], n: usize, row: usize, used: &mut Vec<bool>) -> Complex64 {
            if row == n {
                return Complex64::new(1.0, 0.0);
            }
            let mut s = Complex64::new(0.0, 0.0);
            for c in 0..n {
                if !used[c] {
                    used[c] = true;
                    s += a[row * n + c] * rec(a, n, row + 1, used);
                    used[c] = false;
                }
            }
            s
        }
        rec(a, n, 0, &mut vec![false; n])
    }

    #[test]
    fn matches_permutation_sum() {
        for n in 1..=6 {
            let a: Vec<Complex64> = (0..n * n)
                .map(|i| Complex64::new((i as f64 * 0.73).sin(), (i as f64 * 1.31).cos()))
                .collect();
            let want = permanent_naive(&a, n);
            assert!((permanent(&a, n) - want).norm() < 1e-10 * (1.0 + want.norm()));
        }
    }

    #[test]
    fn all_ones_gives_factorial() {
        let a = vec![Complex64::new(1.0, 0.0); 25];
        assert!((permanent(&a, 5).re - 120.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_splitter_permanent_vanishes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let a = [h, -h, h, h].map(|v| Complex64::new(v, 0.0));
        assert!(permanent(&a, 2).norm() < 1e-15);
    }
}
