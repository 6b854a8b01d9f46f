//! Dense column-major f64 matrices and the symmetric kernels every
//! rate-reduction computation sits on: Cholesky log-determinant, SPD solve,
//! and a cyclic Jacobi eigendecomposition.
//!
//! Everything here is a pure function of its inputs and deterministic, so the
//! same matrices produce bit-identical results on every call.

use crate::error::{CoreError, Result};

/// Dense matrix, column-major storage.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 36 {
            for i in 0..self.rows {
                write!(f, "\n  ")?;
                for j in 0..self.cols {
                    write!(f, "{:10.5} ", self.get(i, j))?;
                }
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from column-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    /// Build from row-major literal rows (convenient in tests).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Self {
        let c = cols.len();
        let r = if c == 0 { 0 } else { cols[0].len() };
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), r, "ragged columns");
            m.col_mut(j).copy_from_slice(col);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for j in 0..self.cols {
            for i in 0..self.rows {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let m = self.rows;
        for j in 0..other.cols {
            let bcol = other.col(j);
            let ocol = &mut out.data[j * m..(j + 1) * m];
            for (l, &blj) in bcol.iter().enumerate() {
                if blj == 0.0 {
                    continue;
                }
                let acol = &self.data[l * m..(l + 1) * m];
                for (o, a) in ocol.iter_mut().zip(acol.iter()) {
                    *o += a * blj;
                }
            }
        }
        out
    }

    /// `selfᵀ * other`
    pub fn matmul_transpose_self(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_transpose_self shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for j in 0..other.cols {
            let bcol = other.col(j);
            for i in 0..self.cols {
                let acol = self.col(i);
                let mut acc = 0.0;
                for (a, b) in acol.iter().zip(bcol.iter()) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `self * otherᵀ`
    pub fn matmul_transpose_other(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_transpose_other shape mismatch");
        let m = self.rows;
        let n = other.rows;
        let mut out = Matrix::zeros(m, n);
        for l in 0..self.cols {
            let acol = &self.data[l * m..(l + 1) * m];
            let bcol = other.col(l);
            for (j, &bjl) in bcol.iter().enumerate() {
                if bjl == 0.0 {
                    continue;
                }
                let ocol = &mut out.data[j * m..(j + 1) * m];
                for (o, a) in ocol.iter_mut().zip(acol.iter()) {
                    *o += a * bjl;
                }
            }
        }
        out
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.data.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    /// Add `alpha` to every diagonal entry.
    pub fn add_diagonal(&mut self, alpha: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            let v = self.get(i, i);
            self.set(i, i, v + alpha);
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hstack row mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        }
    }

    /// Copy of columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        Matrix {
            rows: self.rows,
            cols: end - start,
            data: self.data[start * self.rows..end * self.rows].to_vec(),
        }
    }

    /// Copy of the listed columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for (dst, &src) in indices.iter().enumerate() {
            out.col_mut(dst).copy_from_slice(self.col(src));
        }
        out
    }

    /// Mean of the columns.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.rows];
        for j in 0..self.cols {
            for (m, v) in mean.iter_mut().zip(self.col(j)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.cols.max(1) as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        mean
    }

    /// Subtract a vector from every column.
    pub fn subtract_column_vector(&self, v: &[f64]) -> Matrix {
        assert_eq!(v.len(), self.rows);
        let mut out = self.clone();
        for j in 0..out.cols {
            for (o, s) in out.col_mut(j).iter_mut().zip(v.iter()) {
                *o -= s;
            }
        }
        out
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0f64;
        for j in 0..self.cols {
            for i in 0..j {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending and
/// eigenvector columns orthonormal.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

fn check_symmetric(m: &Matrix, what: &str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(CoreError::arg(format!(
            "{what}: matrix must be square, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs().max(1.0);
    if m.asymmetry() > 1e-10 * scale {
        return Err(CoreError::arg(format!(
            "{what}: matrix not symmetric (asymmetry {:e})",
            m.asymmetry()
        )));
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of an SPD matrix.
///
/// A non-positive pivot reports the failing index, which is the standard
/// positive-definiteness test.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m, "cholesky")?;
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            diag -= v * v;
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(CoreError::NotPositiveDefinite {
                index: j,
                value: diag,
            });
        }
        let dsqrt = diag.sqrt();
        l.set(j, j, dsqrt);
        for i in j + 1..n {
            let mut v = m.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / dsqrt);
        }
    }
    Ok(l)
}

/// log det of a symmetric positive-definite matrix via Cholesky:
/// 2 * sum(log L_ii).
pub fn log_det_spd(m: &Matrix) -> Result<f64> {
    let l = cholesky(m)?;
    let mut acc = 0.0;
    for i in 0..l.rows() {
        acc += l.get(i, i).ln();
    }
    Ok(2.0 * acc)
}

/// Solve M X = B for SPD `m`.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != m.rows() {
        return Err(CoreError::arg(format!(
            "solve_spd: rhs has {} rows, matrix is {}x{}",
            b.rows(),
            m.rows(),
            m.cols()
        )));
    }
    let l = cholesky(m)?;
    let n = m.rows();
    let mut x = b.clone();
    for j in 0..x.cols() {
        let col = x.col_mut(j);
        // forward: L y = b
        for i in 0..n {
            let mut v = col[i];
            for k in 0..i {
                v -= l.get(i, k) * col[k];
            }
            col[i] = v / l.get(i, i);
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = col[i];
            for k in i + 1..n {
                v -= l.get(k, i) * col[k];
            }
            col[i] = v / l.get(i, i);
        }
    }
    Ok(x)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.
/// Tolerance 1e-12 relative off-diagonal mass, at most 100 sweeps.
fn jacobi_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    if n == 1 {
        return Ok((vec![a.get(0, 0)], v));
    }
    let total_norm = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * total_norm;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            let eigenvalues = (0..n).map(|i| a.get(i, i)).collect();
            return Ok((eigenvalues, v));
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol * 1e-4 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // rotate rows/cols p and q of a
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // keep exact symmetry of the rotated pair
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(CoreError::Decomposition(
        "jacobi eigendecomposition did not converge in 100 sweeps".into(),
    ))
}

/// Leading `r` eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// The sign of each eigenvector is fixed by making its largest-magnitude
/// entry positive (lowest index on exact magnitude ties), so results are
/// deterministic.
pub fn top_eigenvectors(m: &Matrix, r: usize) -> Result<SpectralDecomposition> {
    check_symmetric(m, "top_eigenvectors")?;
    let n = m.rows();
    if r == 0 || r > n {
        return Err(CoreError::arg(format!(
            "top_eigenvectors: r={r} out of range 1..={n}"
        )));
    }
    let (values, vectors) = jacobi_eigen(m)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let mut eigenvalues = Vec::with_capacity(r);
    let mut eigenvectors = Matrix::zeros(n, r);
    for (dst, &src) in order.iter().take(r).enumerate() {
        eigenvalues.push(values[src]);
        let col = vectors.col(src);
        // sign convention: largest-magnitude entry positive
        let mut pivot = 0;
        for (k, val) in col.iter().enumerate() {
            if val.abs() > col[pivot].abs() {
                pivot = k;
            }
        }
        let flip = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (k, val) in col.iter().enumerate() {
            eigenvectors.set(k, dst, flip * val);
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    fn random_matrix(rng: &mut RunRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn random_spd(rng: &mut RunRng, n: usize) -> Matrix {
        let b = random_matrix(rng, n, n);
        let mut m = b.matmul_transpose_other(&b);
        m.add_diagonal(1.0);
        // clean up rounding asymmetry
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (m.get(i, j) + m.get(j, i));
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn logdet_identity_is_zero() {
        assert_eq!(log_det_spd(&Matrix::identity(3)).unwrap(), 0.0);
    }

    #[test]
    fn logdet_diagonal() {
        let mut m = Matrix::identity(3);
        m.set(0, 0, 2.5);
        m.set(1, 1, 2.5);
        let got = log_det_spd(&m).unwrap();
        assert!((got - 6.25f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn logdet_matches_eigenvalue_product_oracle() {
        let mut rng = RunRng::seed_from_u64(42);
        let m = random_spd(&mut rng, 5);
        let spec = top_eigenvectors(&m, 5).unwrap();
        let oracle: f64 = spec.eigenvalues.iter().map(|v| v.ln()).sum();
        let got = log_det_spd(&m).unwrap();
        assert!((got - oracle).abs() < 1e-10, "got {got}, oracle {oracle}");
    }

    #[test]
    fn logdet_rejects_indefinite_naming_pivot() {
        let m = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -2.0]]);
        match log_det_spd(&m) {
            Err(CoreError::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected pivot failure, got {other:?}"),
        }
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let mut rng = RunRng::seed_from_u64(1);
        let b = random_matrix(&mut rng, 4, 3);
        let x = solve_spd(&Matrix::identity(4), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal_hand_case() {
        let m = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let b = Matrix::from_columns(&[vec![2.0, 4.0]]);
        let x = solve_spd(&m, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_residual_bound_on_random_systems() {
        let mut rng = RunRng::seed_from_u64(9);
        for n in [2usize, 5, 17] {
            let m = random_spd(&mut rng, n);
            let b = random_matrix(&mut rng, n, 4);
            let x = solve_spd(&m, &b).unwrap();
            let mut resid = m.matmul(&x);
            resid.axpy(-1.0, &b);
            let rel = resid.frobenius_norm() / b.frobenius_norm();
            assert!(rel <= 1e-9, "n={n} relative residual {rel:e}");
        }
    }

    #[test]
    fn solve_rejects_singular() {
        let m = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let b = Matrix::from_columns(&[vec![1.0, 1.0]]);
        assert!(matches!(
            solve_spd(&m, &b),
            Err(CoreError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn top_eigenvectors_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let spec = top_eigenvectors(&m, 2).unwrap();
        assert_eq!(spec.eigenvalues, vec![3.0, 2.0]);
        assert!((spec.eigenvectors.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((spec.eigenvectors.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_eigenvectors_rank_one() {
        let inv = 1.0 / 2.0f64.sqrt();
        let v = vec![inv, inv];
        let m = Matrix::from_columns(&[v.clone()]).matmul_transpose_other(&Matrix::from_columns(&[v]));
        let spec = top_eigenvectors(&m, 1).unwrap();
        assert!((spec.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((spec.eigenvectors.get(0, 0) - inv).abs() < 1e-12);
        assert!((spec.eigenvectors.get(1, 0) - inv).abs() < 1e-12);
    }

    #[test]
    fn top_eigenvectors_residuals_and_orthonormality() {
        let mut rng = RunRng::seed_from_u64(5);
        let m = random_spd(&mut rng, 6);
        let spec = top_eigenvectors(&m, 6).unwrap();
        for k in 0..6 {
            let v = spec.eigenvectors.columns(k, k + 1);
            let mut resid = m.matmul(&v);
            resid.axpy(-spec.eigenvalues[k], &v);
            assert!(resid.frobenius_norm() < 1e-9, "pair {k}");
        }
        let gram = spec
            .eigenvectors
            .matmul_transpose_self(&spec.eigenvectors);
        let mut delta = gram.clone();
        delta.axpy(-1.0, &Matrix::identity(6));
        assert!(delta.max_abs() < 1e-10);
        // sorted descending
        for k in 1..6 {
            assert!(spec.eigenvalues[k - 1] >= spec.eigenvalues[k]);
        }
    }

    #[test]
    fn top_eigenvectors_rejects_bad_r() {
        let m = Matrix::identity(3);
        assert!(matches!(
            top_eigenvectors(&m, 0),
            Err(CoreError::InvalidArgument(_))
        ));
        assert!(matches!(
            top_eigenvectors(&m, 4),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let mut rng = RunRng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 4, 3);
        let direct = a.transpose().matmul(&b);
        let fused = a.matmul_transpose_self(&b);
        let mut delta = direct.clone();
        delta.axpy(-1.0, &fused);
        assert!(delta.max_abs() < 1e-13);

        let c = random_matrix(&mut rng, 5, 6);
        let direct2 = a.matmul(&c.transpose());
        let fused2 = a.matmul_transpose_other(&c);
        let mut delta2 = direct2.clone();
        delta2.axpy(-1.0, &fused2);
        assert!(delta2.max_abs() < 1e-13);
    }
}
