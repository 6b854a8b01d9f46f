//! Coding-rate functionals on feature matrices: the rate R(Z), the
//! multi-class rate reduction ΔR, the pairwise ΔR distance between two
//! feature ensembles, and their closed-form gradients.
//!
//! Feature matrices are d×n with one sample per column. All rates are
//! evaluated through whichever Gram side (d×d or n×n) is smaller; the two
//! sides agree analytically and to ~1e-9 numerically, which the tests pin.

use crate::error::{CoreError, Result};
use crate::linalg::{log_det_spd, solve_spd, Matrix};

/// Quantization settings for the rate functionals.
///
/// `normalize_features` is consumed by the trainer (features are projected to
/// the unit sphere before any rate term); the functions in this module never
/// normalize, so they can be fed raw matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateConfig {
    pub epsilon_sq: f64,
    pub normalize_features: bool,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            epsilon_sq: 1.0,
            normalize_features: true,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_sq > 0.0) || !self.epsilon_sq.is_finite() {
            return Err(CoreError::arg(format!(
                "epsilon_sq must be positive and finite, got {}",
                self.epsilon_sq
            )));
        }
        Ok(())
    }
}

/// Assignment of each feature column to one of `k` classes.
#[derive(Clone, Debug)]
pub struct ClassPartition {
    labels: Vec<usize>,
    k: usize,
    by_class: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(CoreError::arg("partition needs at least one class"));
        }
        let mut by_class = vec![Vec::new(); k];
        for (col, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(CoreError::arg(format!(
                    "label {label} at column {col} outside 0..{k}"
                )));
            }
            by_class[label].push(col);
        }
        if let Some(empty) = by_class.iter().position(|c| c.is_empty()) {
            return Err(CoreError::arg(format!("class {empty} is empty")));
        }
        Ok(Self {
            labels,
            k,
            by_class,
        })
    }

    /// Contiguous blocks: class j covers columns with the given sizes, in order.
    pub fn from_block_sizes(sizes: &[usize]) -> Result<Self> {
        let mut labels = Vec::new();
        for (j, &s) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat(j).take(s));
        }
        Self::new(labels, sizes.len())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_columns(&self, j: usize) -> &[usize] {
        &self.by_class[j]
    }
}

fn check_features(z: &Matrix, what: &str) -> Result<()> {
    if z.is_empty() {
        return Err(CoreError::arg(format!("{what}: empty feature matrix")));
    }
    if !z.all_finite() {
        return Err(CoreError::arg(format!("{what}: non-finite entries")));
    }
    Ok(())
}

/// ½ log det(I + α Z Zᵀ) with α = d/(n ε²), through the smaller Gram side.
pub fn coding_rate(z: &Matrix, cfg: &RateConfig) -> Result<f64> {
    check_features(z, "coding_rate")?;
    cfg.validate()?;
    let alpha = z.rows() as f64 / (z.cols() as f64 * cfg.epsilon_sq);
    coding_rate_alpha(z, alpha)
}

fn coding_rate_alpha(z: &Matrix, alpha: f64) -> Result<f64> {
    let mut gram = if z.rows() <= z.cols() {
        z.matmul_transpose_other(z)
    } else {
        z.matmul_transpose_self(z)
    };
    gram.scale(alpha);
    gram.add_diagonal(1.0);
    symmetrize(&mut gram);
    Ok(0.5 * log_det_spd(&gram)?)
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// ΔR(Z_1, …, Z_k) = R(Z) − Σ_j γ_j R(Z_j) with γ_j = |Z_j|/n and per-class
/// α_j = d/(|Z_j| ε²).
pub fn rate_reduction(z: &Matrix, part: &ClassPartition, cfg: &RateConfig) -> Result<f64> {
    check_features(z, "rate_reduction")?;
    cfg.validate()?;
    if part.len() != z.cols() {
        return Err(CoreError::arg(format!(
            "partition covers {} columns, matrix has {}",
            part.len(),
            z.cols()
        )));
    }
    let n = z.cols() as f64;
    let mut value = coding_rate(z, cfg)?;
    for j in 0..part.num_classes() {
        let zj = z.select_columns(part.class_columns(j));
        let gamma_j = zj.cols() as f64 / n;
        value -= gamma_j * coding_rate(&zj, cfg)?;
    }
    Ok(value)
}

/// ΔR(Z_j, Ẑ_j) = R(Z_j ∪ Ẑ_j) − ½ (R(Z_j) + R(Ẑ_j)); the union is column
/// concatenation and every R uses its own sample count in α.
pub fn pairwise_delta_r(zj: &Matrix, zhat: &Matrix, cfg: &RateConfig) -> Result<f64> {
    check_features(zj, "pairwise_delta_r")?;
    check_features(zhat, "pairwise_delta_r")?;
    cfg.validate()?;
    if zj.rows() != zhat.rows() {
        return Err(CoreError::arg(format!(
            "pairwise_delta_r: feature dimensions differ ({} vs {})",
            zj.rows(),
            zhat.rows()
        )));
    }
    let union = zj.hstack(zhat);
    Ok(coding_rate(&union, cfg)? - 0.5 * (coding_rate(zj, cfg)? + coding_rate(zhat, cfg)?))
}

/// ∂R/∂Z = α (I + α Z Zᵀ)⁻¹ Z, solved on the smaller Gram side.
pub fn grad_coding_rate(z: &Matrix, cfg: &RateConfig) -> Result<Matrix> {
    check_features(z, "grad_coding_rate")?;
    cfg.validate()?;
    let alpha = z.rows() as f64 / (z.cols() as f64 * cfg.epsilon_sq);
    grad_coding_rate_alpha(z, alpha)
}

fn grad_coding_rate_alpha(z: &Matrix, alpha: f64) -> Result<Matrix> {
    if z.rows() <= z.cols() {
        let mut gram = z.matmul_transpose_other(z);
        gram.scale(alpha);
        gram.add_diagonal(1.0);
        symmetrize(&mut gram);
        let mut x = solve_spd(&gram, z)?;
        x.scale(alpha);
        Ok(x)
    } else {
        // α Z (I + α ZᵀZ)⁻¹ = α (solve(I + α ZᵀZ, Zᵀ))ᵀ
        let mut gram = z.matmul_transpose_self(z);
        gram.scale(alpha);
        gram.add_diagonal(1.0);
        symmetrize(&mut gram);
        let w = solve_spd(&gram, &z.transpose())?;
        let mut x = w.transpose();
        x.scale(alpha);
        Ok(x)
    }
}

/// Gradient of [`rate_reduction`] with respect to every feature entry.
pub fn grad_rate_reduction(z: &Matrix, part: &ClassPartition, cfg: &RateConfig) -> Result<Matrix> {
    check_features(z, "grad_rate_reduction")?;
    cfg.validate()?;
    if part.len() != z.cols() {
        return Err(CoreError::arg(format!(
            "partition covers {} columns, matrix has {}",
            part.len(),
            z.cols()
        )));
    }
    let n = z.cols() as f64;
    let mut grad = grad_coding_rate(z, cfg)?;
    for j in 0..part.num_classes() {
        let cols = part.class_columns(j);
        let zj = z.select_columns(cols);
        let gamma_j = zj.cols() as f64 / n;
        let gj = grad_coding_rate(&zj, cfg)?;
        for (local, &col) in cols.iter().enumerate() {
            let src = gj.col(local);
            let dst = grad.col_mut(col);
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d -= gamma_j * s;
            }
        }
    }
    Ok(grad)
}

/// Gradients of [`pairwise_delta_r`] with respect to both ensembles.
pub fn grad_pairwise_delta_r(
    zj: &Matrix,
    zhat: &Matrix,
    cfg: &RateConfig,
) -> Result<(Matrix, Matrix)> {
    check_features(zj, "grad_pairwise_delta_r")?;
    check_features(zhat, "grad_pairwise_delta_r")?;
    cfg.validate()?;
    if zj.rows() != zhat.rows() {
        return Err(CoreError::arg(format!(
            "grad_pairwise_delta_r: feature dimensions differ ({} vs {})",
            zj.rows(),
            zhat.rows()
        )));
    }
    let union = zj.hstack(zhat);
    let grad_union = grad_coding_rate(&union, cfg)?;
    let mut ga = grad_union.columns(0, zj.cols());
    let mut gb = grad_union.columns(zj.cols(), union.cols());
    ga.axpy(-0.5, &grad_coding_rate(zj, cfg)?);
    gb.axpy(-0.5, &grad_coding_rate(zhat, cfg)?);
    Ok((ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    fn cfg() -> RateConfig {
        RateConfig::default()
    }

    fn random_matrix(rng: &mut RunRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn rate_of_zero_matrix_is_zero() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(coding_rate(&z, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn rate_of_standard_basis_d2() {
        // Z = [e1 e2] in d=2: α=1, ½ log det(2 I₂) = ln 2
        let z = Matrix::identity(2);
        let got = coding_rate(&z, &cfg()).unwrap();
        assert!((got - 2.0f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn rate_of_standard_basis_d3() {
        // Z = [e1 e2] in d=3, n=2: α=1.5, ½ ln(2.5 · 2.5 · 1)
        let z = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let got = coding_rate(&z, &cfg()).unwrap();
        let expect = 0.5 * (2.5f64 * 2.5).ln();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn rate_rejects_empty() {
        let z = Matrix::zeros(0, 0);
        assert!(matches!(
            coding_rate(&z, &cfg()),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_class_reduction_is_exactly_zero() {
        let mut rng = RunRng::seed_from_u64(0);
        let z = random_matrix(&mut rng, 4, 7);
        let part = ClassPartition::from_block_sizes(&[7]).unwrap();
        assert_eq!(rate_reduction(&z, &part, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn two_orthogonal_singletons() {
        // d=2, Z₁={e1}, Z₂={e2}: ln2 − ½·½ln3 − ½·½ln3
        let z = Matrix::identity(2);
        let part = ClassPartition::from_block_sizes(&[1, 1]).unwrap();
        let got = rate_reduction(&z, &part, &cfg()).unwrap();
        let expect = 2.0f64.ln() - 0.5 * 3.0f64.ln();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
        assert!((expect - 0.14384).abs() < 1e-4);
    }

    #[test]
    fn identical_classes_reduce_nothing() {
        let z = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let part = ClassPartition::from_block_sizes(&[1, 1]).unwrap();
        let got = rate_reduction(&z, &part, &cfg()).unwrap();
        assert!(got.abs() < 1e-12, "got {got}");
    }

    #[test]
    fn partition_rejects_empty_class() {
        assert!(ClassPartition::new(vec![0, 0, 2], 3).is_err());
        assert!(ClassPartition::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn pairwise_identical_ensembles_is_zero() {
        let mut rng = RunRng::seed_from_u64(3);
        let z = random_matrix(&mut rng, 3, 5);
        let got = pairwise_delta_r(&z, &z, &cfg()).unwrap();
        assert!(got.abs() < 1e-12, "got {got}");
    }

    #[test]
    fn pairwise_orthogonal_singletons() {
        let za = Matrix::from_columns(&[vec![1.0, 0.0]]);
        let zb = Matrix::from_columns(&[vec![0.0, 1.0]]);
        let got = pairwise_delta_r(&za, &zb, &cfg()).unwrap();
        let expect = 2.0f64.ln() - 0.5 * 3.0f64.ln();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn pairwise_scaled_copy() {
        // Zj={e1}, Ẑj={2 e1}: ½ln6 − ½(½ln3 + ½ln9)
        let za = Matrix::from_columns(&[vec![1.0, 0.0]]);
        let zb = Matrix::from_columns(&[vec![2.0, 0.0]]);
        let got = pairwise_delta_r(&za, &zb, &cfg()).unwrap();
        let expect = 0.5 * 6.0f64.ln() - 0.5 * (0.5 * 3.0f64.ln() + 0.5 * 9.0f64.ln());
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
        assert!((expect - 0.07192).abs() < 1e-4);
    }

    #[test]
    fn pairwise_rejects_dimension_mismatch() {
        let za = Matrix::zeros(2, 1);
        let zb = Matrix::zeros(3, 1);
        assert!(matches!(
            pairwise_delta_r(&za, &zb, &cfg()),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn gram_side_duality() {
        // R computed through d×d and n×n sides agrees
        let mut rng = RunRng::seed_from_u64(8);
        for (d, n) in [(3usize, 9usize), (9, 3), (6, 6)] {
            let z = random_matrix(&mut rng, d, n);
            let alpha = d as f64 / (n as f64 * 1.0);
            let mut small = if d <= n {
                z.matmul_transpose_other(&z)
            } else {
                z.matmul_transpose_self(&z)
            };
            small.scale(alpha);
            small.add_diagonal(1.0);
            let mut big = if d <= n {
                z.matmul_transpose_self(&z)
            } else {
                z.matmul_transpose_other(&z)
            };
            big.scale(alpha);
            big.add_diagonal(1.0);
            let a = log_det_spd(&small).unwrap();
            let b = log_det_spd(&big).unwrap();
            assert!((a - b).abs() < 1e-9, "d={d} n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn grad_at_zero_is_zero() {
        let z = Matrix::zeros(3, 4);
        let g = grad_coding_rate(&z, &cfg()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn grad_scalar_case() {
        // d=1, n=1, Z=[1]: dR/dz = z/(1+z²) = 0.5
        let z = Matrix::from_columns(&[vec![1.0]]);
        let g = grad_coding_rate(&z, &cfg()).unwrap();
        assert!((g.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_gradient_is_zero() {
        let mut rng = RunRng::seed_from_u64(12);
        let z = random_matrix(&mut rng, 3, 6);
        let part = ClassPartition::from_block_sizes(&[6]).unwrap();
        let g = grad_rate_reduction(&z, &part, &cfg()).unwrap();
        assert!(g.max_abs() < 1e-12, "max {:e}", g.max_abs());
    }

    // central finite differences of a scalar function of Z
    fn numeric_grad(z: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(z.rows(), z.cols());
        for j in 0..z.cols() {
            for i in 0..z.rows() {
                let mut zp = z.clone();
                zp.set(i, j, z.get(i, j) + h);
                let mut zm = z.clone();
                zm.set(i, j, z.get(i, j) - h);
                g.set(i, j, (f(&zp) - f(&zm)) / (2.0 * h));
            }
        }
        g
    }

    fn assert_close(analytic: &Matrix, numeric: &Matrix, tol: f64, what: &str) {
        let mut delta = analytic.clone();
        delta.axpy(-1.0, numeric);
        let rel = delta.max_abs() / numeric.max_abs().max(1e-12);
        assert!(rel < tol, "{what}: relative error {rel:e}");
    }

    #[test]
    fn grad_coding_rate_matches_finite_differences() {
        let mut rng = RunRng::seed_from_u64(21);
        let z = random_matrix(&mut rng, 4, 7);
        let analytic = grad_coding_rate(&z, &cfg()).unwrap();
        let numeric = numeric_grad(&z, |m| coding_rate(m, &cfg()).unwrap());
        assert_close(&analytic, &numeric, 1e-6, "grad_coding_rate");
    }

    #[test]
    fn grad_rate_reduction_matches_finite_differences() {
        let mut rng = RunRng::seed_from_u64(22);
        let z = random_matrix(&mut rng, 4, 9);
        let part = ClassPartition::from_block_sizes(&[3, 2, 4]).unwrap();
        let analytic = grad_rate_reduction(&z, &part, &cfg()).unwrap();
        let numeric = numeric_grad(&z, |m| rate_reduction(m, &part, &cfg()).unwrap());
        assert_close(&analytic, &numeric, 1e-6, "grad_rate_reduction");
    }

    #[test]
    fn grad_pairwise_matches_finite_differences() {
        let mut rng = RunRng::seed_from_u64(23);
        let za = random_matrix(&mut rng, 3, 5);
        let zb = random_matrix(&mut rng, 3, 4);
        let (ga, gb) = grad_pairwise_delta_r(&za, &zb, &cfg()).unwrap();
        let na = numeric_grad(&za, |m| pairwise_delta_r(m, &zb, &cfg()).unwrap());
        let nb = numeric_grad(&zb, |m| pairwise_delta_r(&za, m, &cfg()).unwrap());
        assert_close(&ga, &na, 1e-6, "pairwise lhs");
        assert_close(&gb, &nb, 1e-6, "pairwise rhs");
    }

    #[test]
    fn pairwise_gradients_cancel_at_symmetric_point() {
        let mut rng = RunRng::seed_from_u64(24);
        let z = random_matrix(&mut rng, 3, 5);
        let (ga, gb) = grad_pairwise_delta_r(&z, &z, &cfg()).unwrap();
        let mut sum = ga.clone();
        sum.axpy(1.0, &gb);
        assert!(sum.max_abs() < 1e-9, "stationary sum {:e}", sum.max_abs());
    }
}
