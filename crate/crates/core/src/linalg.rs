//! Minimal dense linear algebra for small regression problems.
//!
//! Everything here operates on matrices with at most a few dozen columns, so
//! the implementations favour clarity and determinism over blocking or SIMD.
//! The QR decomposition processes columns strictly in their given order; this
//! ordering guarantee is load-bearing for the sparsity detector, which must
//! drop a column if and only if it lies in the span of *earlier* retained
//! columns.

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data. Panics if `data.len() != rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// New matrix keeping only the given columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, keep.len());
        for r in 0..self.rows {
            for (j, &c) in keep.iter().enumerate() {
                out.set(r, j, self.get(r, c));
            }
        }
        out
    }

    /// `self^T * self` (symmetric Gram matrix).
    pub fn gram(&self) -> Matrix {
        let m = self.cols;
        let mut g = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut s = 0.0;
                for r in 0..self.rows {
                    s += self.get(r, i) * self.get(r, j);
                }
                g.set(i, j, s);
                g.set(j, i, s);
            }
        }
        g
    }

    /// `self^T * v`.
    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += row[c] * v[r];
            }
        }
        out
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(self.row(r), v))
            .collect()
    }

    /// `self * other`.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.set(r, c, out.get(r, c) + a * other.get(k, c));
                }
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Sequential thin QR that scans columns in their given order and drops any
/// column numerically dependent on the columns retained before it.
///
/// A column is dropped when the norm of its residual, after projecting onto
/// the previously retained orthonormal basis, falls below `rel_tol` times the
/// column's own norm. Exactly-zero columns are always dropped.
pub struct SequentialQr {
    /// Orthonormal basis of the retained columns, one `Vec` per basis vector.
    q: Vec<Vec<f64>>,
    /// Upper-triangular factor, `r[i][j]` = projection of retained column `j`
    /// onto basis vector `i` (square, size = number retained).
    r: Vec<Vec<f64>>,
    /// Indices (into the original matrix) of retained columns, ascending.
    retained: Vec<usize>,
    /// Indices of dropped columns, ascending.
    dropped: Vec<usize>,
}

impl SequentialQr {
    pub fn decompose(design: &Matrix, rel_tol: f64) -> SequentialQr {
        let mut q: Vec<Vec<f64>> = Vec::new();
        let mut r: Vec<Vec<f64>> = Vec::new();
        let mut retained = Vec::new();
        let mut dropped = Vec::new();

        for j in 0..design.cols() {
            let col = design.column(j);
            let col_norm = norm2(&col);
            if col_norm == 0.0 {
                dropped.push(j);
                continue;
            }
            // Two rounds of modified Gram-Schmidt keep the basis orthonormal
            // even when columns are nearly dependent.
            let mut v = col;
            let mut coeffs = vec![0.0; q.len()];
            for _ in 0..2 {
                for (i, qi) in q.iter().enumerate() {
                    let c = dot(qi, &v);
                    coeffs[i] += c;
                    for (vk, qk) in v.iter_mut().zip(qi) {
                        *vk -= c * qk;
                    }
                }
            }
            let res_norm = norm2(&v);
            if res_norm <= rel_tol * col_norm {
                dropped.push(j);
            } else {
                for vk in v.iter_mut() {
                    *vk /= res_norm;
                }
                coeffs.push(res_norm);
                q.push(v);
                r.push(coeffs);
                retained.push(j);
            }
        }

        SequentialQr {
            q,
            r,
            retained,
            dropped,
        }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn rank(&self) -> usize {
        self.retained.len()
    }

    /// Least-squares coefficients for the retained columns: solves
    /// `R x = Q^T y` by back substitution.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let k = self.rank();
        let qty: Vec<f64> = self.q.iter().map(|qi| dot(qi, y)).collect();
        let mut x = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = qty[i];
            for j in (i + 1)..k {
                // r is stored column-wise: r[j][i] is R_{i,j}.
                s -= self.r[j][i] * x[j];
            }
            x[i] = s / self.r[i][i];
        }
        x
    }

    /// Diagonal of `(X^T X)^{-1}` for the retained columns, computed as the
    /// squared row norms of `R^{-1}`.
    pub fn normal_inverse_diagonal(&self) -> Vec<f64> {
        let k = self.rank();
        // Invert upper-triangular R column by column; rinv[i][j] = (R^{-1})_{i,j}.
        // R entries live column-wise in self.r: R_{i,j} = self.r[j][i].
        let mut rinv = vec![vec![0.0; k]; k];
        for j in 0..k {
            rinv[j][j] = 1.0 / self.r[j][j];
            for i in (0..j).rev() {
                let mut s = 0.0;
                for l in (i + 1)..=j {
                    s += self.r[l][i] * rinv[l][j];
                }
                rinv[i][j] = -s / self.r[i][i];
            }
        }
        (0..k)
            .map(|i| (i..k).map(|j| rinv[i][j] * rinv[i][j]).sum())
            .collect()
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Stores the lower-triangular factor `L` with `A = L L^T`.
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Returns `None` when the matrix is not (numerically) positive definite.
    pub fn decompose(a: &Matrix) -> Option<Cholesky> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "Cholesky requires a square matrix");
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l.set(i, i, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Some(Cholesky { l })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let y = self.forward_solve(b);
        self.backward_solve(&y)
    }

    /// Solves `L y = b`.
    pub fn forward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.l.get(i, j) * y[j];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }

    /// Solves `L^T x = b`.
    pub fn backward_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in (i + 1)..n {
                s -= self.l.get(j, i) * x[j];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn qr_full_rank_solves_normal_equations() {
        // X = [[1,0],[1,1],[1,2]], y = [1,2,4] -> beta = (0.8333..., 1.5)
        let x = Matrix::from_rows(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let qr = SequentialQr::decompose(&x, 1e-8);
        assert_eq!(qr.retained(), &[0, 1]);
        let beta = qr.solve(&[1.0, 2.0, 4.0]);
        approx(beta[0], 5.0 / 6.0, 1e-12);
        approx(beta[1], 1.5, 1e-12);
    }

    #[test]
    fn qr_drops_dependent_and_zero_columns() {
        // col1 = intercept, col2 = 2*intercept, col3 = zeros, col4 independent
        let x = Matrix::from_rows(
            3,
            4,
            vec![
                1.0, 2.0, 0.0, 1.0, //
                1.0, 2.0, 0.0, 2.0, //
                1.0, 2.0, 0.0, 3.0,
            ],
        );
        let qr = SequentialQr::decompose(&x, 1e-8);
        assert_eq!(qr.retained(), &[0, 3]);
        assert_eq!(qr.dropped(), &[1, 2]);
    }

    #[test]
    fn qr_keeps_earlier_column_of_a_dependent_pair() {
        let x = Matrix::from_rows(2, 2, vec![1.0, 2.0, -1.0, -2.0]);
        let qr = SequentialQr::decompose(&x, 1e-8);
        assert_eq!(qr.retained(), &[0]);
        assert_eq!(qr.dropped(), &[1]);
    }

    #[test]
    fn normal_inverse_diagonal_matches_direct_inverse() {
        // X^T X = [[4,2],[2,2]] -> inverse = [[0.5,-0.5],[-0.5,1.0]]
        let x = Matrix::from_rows(
            4,
            2,
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        );
        let qr = SequentialQr::decompose(&x, 1e-8);
        let d = qr.normal_inverse_diagonal();
        approx(d[0], 0.5, 1e-12);
        approx(d[1], 1.0, 1e-12);
    }

    #[test]
    fn cholesky_round_trip() {
        let a = Matrix::from_rows(3, 3, vec![4.0, 2.0, 0.4, 2.0, 3.0, 0.1, 0.4, 0.1, 1.5]);
        let ch = Cholesky::decompose(&a).expect("SPD");
        let b = [1.0, -2.0, 0.5];
        let x = ch.solve(&b);
        let back = a.mul_vec(&x);
        for (u, v) in back.iter().zip(b.iter()) {
            approx(*u, *v, 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(Cholesky::decompose(&a).is_none());
    }
}
