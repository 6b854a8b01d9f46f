//! Evaluation of a learned LDR memory: nearest-subspace classification,
//! incremental-accuracy bookkeeping, subspace affinity, and feature
//! correlation summaries.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::memory::SubspaceModel;
use crate::rate::ClassPartition;

/// Predict the class whose principal subspace leaves the smallest residual:
/// argmin_j ‖(I − U_j U_jᵀ)(z − μ_j)‖². Ties go to the lowest class id.
pub fn nearest_subspace_classify(z: &[f64], models: &[&SubspaceModel]) -> Result<usize> {
    if models.is_empty() {
        return Err(CoreError::arg("nearest_subspace_classify: no models"));
    }
    let mut best: Option<(usize, f64)> = None;
    for model in models {
        if model.mean.len() != z.len() {
            return Err(CoreError::arg(format!(
                "nearest_subspace_classify: feature dim {} vs model dim {}",
                z.len(),
                model.mean.len()
            )));
        }
        let centered: Vec<f64> = z.iter().zip(model.mean.iter()).map(|(a, b)| a - b).collect();
        // ‖(I − UUᵀ)c‖² = ‖c‖² − ‖Uᵀc‖²
        let norm_sq: f64 = centered.iter().map(|v| v * v).sum();
        let mut proj_sq = 0.0;
        for k in 0..model.basis.cols() {
            let dot: f64 = model
                .basis
                .col(k)
                .iter()
                .zip(centered.iter())
                .map(|(a, b)| a * b)
                .sum();
            proj_sq += dot * dot;
        }
        let residual = norm_sq - proj_sq;
        let better = match best {
            None => true,
            Some((bid, bres)) => {
                residual < bres || (residual == bres && model.class_id < bid)
            }
        };
        if better {
            best = Some((model.class_id, residual));
        }
    }
    Ok(best.unwrap().0)
}

/// Classification outcome over a labeled feature set.
#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    pub overall_accuracy: f64,
    pub per_class: BTreeMap<usize, ClassCounts>,
    /// test labels with no stored model; always counted as errors
    pub unknown_label_errors: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ClassCounts {
    pub correct: usize,
    pub total: usize,
}

impl ClassCounts {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Classify already-encoded features column by column against the models.
pub fn evaluate_features(
    features: &Matrix,
    labels: &[usize],
    models: &[&SubspaceModel],
) -> Result<EvalOutcome> {
    if features.cols() != labels.len() {
        return Err(CoreError::arg(format!(
            "evaluate_features: {} feature columns, {} labels",
            features.cols(),
            labels.len()
        )));
    }
    if models.is_empty() {
        return Err(CoreError::arg("evaluate_features: no models"));
    }
    let known: Vec<usize> = models.iter().map(|m| m.class_id).collect();
    let mut outcome = EvalOutcome {
        total: labels.len(),
        ..Default::default()
    };
    let mut correct = 0usize;
    for (col, &label) in labels.iter().enumerate() {
        let counts = outcome.per_class.entry(label).or_default();
        counts.total += 1;
        if !known.contains(&label) {
            outcome.unknown_label_errors += 1;
            continue;
        }
        let predicted = nearest_subspace_classify(features.col(col), models)?;
        if predicted == label {
            counts.correct += 1;
            correct += 1;
        }
    }
    outcome.overall_accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok(outcome)
}

/// Accuracy history across incremental checkpoints.
///
/// `average_incremental_accuracy` follows the standard convention: the mean
/// over task checkpoints t of accuracy on all classes seen through t.
#[derive(Clone, Debug, Default)]
pub struct MetricsRecord {
    pub per_task: Vec<f64>,
    pub per_class: BTreeMap<usize, f64>,
}

impl MetricsRecord {
    pub fn push_checkpoint(&mut self, outcome: &EvalOutcome) {
        self.per_task.push(outcome.overall_accuracy);
        self.per_class = outcome
            .per_class
            .iter()
            .map(|(k, v)| (*k, v.accuracy()))
            .collect();
    }

    pub fn last_accuracy(&self) -> Option<f64> {
        self.per_task.last().copied()
    }

    pub fn average_incremental_accuracy(&self) -> Option<f64> {
        if self.per_task.is_empty() {
            None
        } else {
            Some(self.per_task.iter().sum::<f64>() / self.per_task.len() as f64)
        }
    }
}

fn orthonormality_defect(basis: &Matrix) -> f64 {
    let mut gram = basis.matmul_transpose_self(basis);
    gram.add_diagonal(-1.0);
    gram.max_abs()
}

/// Normalized affinity between two subspaces spanned by orthonormal bases:
/// ‖UᵀU'‖_F / √(r·r') = √(Σ cos²θᵢ / (r·r')), in [0, 1].
pub fn affinity(u: &Matrix, v: &Matrix) -> Result<f64> {
    if u.rows() != v.rows() {
        return Err(CoreError::arg(format!(
            "affinity: ambient dimensions differ ({} vs {})",
            u.rows(),
            v.rows()
        )));
    }
    for (name, basis) in [("first", u), ("second", v)] {
        let defect = orthonormality_defect(basis);
        if defect > 1e-6 {
            return Err(CoreError::arg(format!(
                "affinity: {name} basis not orthonormal (defect {defect:e})"
            )));
        }
    }
    let cross = u.matmul_transpose_self(v);
    let denom = ((u.cols() * v.cols()) as f64).sqrt();
    Ok((cross.frobenius_norm() / denom).min(1.0))
}

/// Summary statistics of an absolute-correlation matrix under a partition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationSummary {
    pub within_class_mean: f64,
    pub cross_class_mean: f64,
}

/// |z_iᵀ z_j| on ℓ2-normalized columns, reordered so classes are contiguous
/// (ascending class index, original order within a class).
pub fn correlation_matrix(
    z: &Matrix,
    part: &ClassPartition,
) -> Result<(Matrix, CorrelationSummary)> {
    if part.len() != z.cols() {
        return Err(CoreError::arg(format!(
            "correlation_matrix: partition covers {} columns, matrix has {}",
            part.len(),
            z.cols()
        )));
    }
    let mut order = Vec::with_capacity(z.cols());
    let mut class_of = Vec::with_capacity(z.cols());
    for j in 0..part.num_classes() {
        for &col in part.class_columns(j) {
            order.push(col);
            class_of.push(j);
        }
    }
    let reordered = z.select_columns(&order);
    let mut normalized = reordered.clone();
    for j in 0..normalized.cols() {
        let norm: f64 = normalized.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(CoreError::arg(format!(
                "correlation_matrix: column {} (original {}) is zero",
                j, order[j]
            )));
        }
        for v in normalized.col_mut(j) {
            *v /= norm;
        }
    }
    let mut corr = normalized.matmul_transpose_self(&normalized);
    for v in corr.data_mut() {
        *v = v.abs().min(1.0);
    }

    let n = corr.rows();
    let mut within = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            if class_of[i] == class_of[j] {
                within.0 += corr.get(i, j);
                within.1 += 1;
            } else {
                cross.0 += corr.get(i, j);
                cross.1 += 1;
            }
        }
    }
    let summary = CorrelationSummary {
        within_class_mean: if within.1 == 0 { 0.0 } else { within.0 / within.1 as f64 },
        cross_class_mean: if cross.1 == 0 { 0.0 } else { cross.0 / cross.1 as f64 },
    };
    Ok((corr, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    fn model(class_id: usize, mean: Vec<f64>, dirs: &[Vec<f64>]) -> SubspaceModel {
        SubspaceModel {
            class_id,
            mean,
            basis: Matrix::from_columns(dirs),
            dim: dirs.len(),
            spectrum: vec![1.0; dirs.len()],
        }
    }

    #[test]
    fn classify_mean_point_is_exact() {
        let a = model(0, vec![5.0, 5.0], &[vec![1.0, 0.0]]);
        let b = model(1, vec![-5.0, -5.0], &[vec![0.0, 1.0]]);
        let got = nearest_subspace_classify(&[5.0, 5.0], &[&a, &b]).unwrap();
        assert_eq!(got, 0);
    }

    #[test]
    fn classify_hand_residuals() {
        // U₁ = span(e1), U₂ = span(e2), μ = 0, z = (0.9, 0.1): residuals 0.01 vs 0.81
        let a = model(1, vec![0.0, 0.0], &[vec![1.0, 0.0]]);
        let b = model(2, vec![0.0, 0.0], &[vec![0.0, 1.0]]);
        let got = nearest_subspace_classify(&[0.9, 0.1], &[&a, &b]).unwrap();
        assert_eq!(got, 1);
    }

    #[test]
    fn classify_tie_break_lowest_id() {
        let a = model(4, vec![0.0, 0.0], &[vec![1.0, 0.0]]);
        let b = model(2, vec![0.0, 0.0], &[vec![0.0, 1.0]]);
        let got = nearest_subspace_classify(&[0.5, 0.5], &[&a, &b]).unwrap();
        assert_eq!(got, 2);
    }

    #[test]
    fn classify_invariant_to_basis_rotation() {
        let mut rng = RunRng::seed_from_u64(3);
        // two orthogonal planes in d=4
        let a = model(0, vec![0.0; 4], &[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let theta: f64 = 0.7;
        let rotated = vec![
            vec![theta.cos(), theta.sin(), 0.0, 0.0],
            vec![-theta.sin(), theta.cos(), 0.0, 0.0],
        ];
        let a_rot = model(0, vec![0.0; 4], &rotated);
        let b = model(1, vec![0.0; 4], &[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let p1 = nearest_subspace_classify(&z, &[&a, &b]).unwrap();
            let p2 = nearest_subspace_classify(&z, &[&a_rot, &b]).unwrap();
            assert_eq!(p1, p2);
        }
    }

    #[test]
    fn evaluate_counts_unknown_labels_as_errors() {
        let a = model(0, vec![0.0, 0.0], &[vec![1.0, 0.0]]);
        let features = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.5, 0.0]]);
        let outcome = evaluate_features(&features, &[0, 9], &[&a]).unwrap();
        assert_eq!(outcome.unknown_label_errors, 1);
        assert!((outcome.overall_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_average_of_constant_sequence() {
        let mut record = MetricsRecord::default();
        for _ in 0..5 {
            record.per_task.push(0.625);
        }
        assert_eq!(record.average_incremental_accuracy(), Some(0.625));
        assert_eq!(record.last_accuracy(), Some(0.625));
    }

    #[test]
    fn affinity_identical_orthogonal_oblique() {
        let e1 = Matrix::from_columns(&[vec![1.0, 0.0]]);
        let e2 = Matrix::from_columns(&[vec![0.0, 1.0]]);
        let inv = 1.0 / 2.0f64.sqrt();
        let diag = Matrix::from_columns(&[vec![inv, inv]]);
        assert!((affinity(&e1, &e1).unwrap() - 1.0).abs() < 1e-12);
        assert!(affinity(&e1, &e2).unwrap().abs() < 1e-12);
        let got = affinity(&e1, &diag).unwrap();
        assert!((got - 0.5f64.sqrt()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn affinity_symmetric_and_basis_invariant() {
        let mut rng = RunRng::seed_from_u64(11);
        // random orthonormal pair via Gram-Schmidt
        let gs = |cols: Vec<Vec<f64>>| -> Matrix {
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for mut c in cols {
                for b in &basis {
                    let dot: f64 = c.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                    for (x, y) in c.iter_mut().zip(b.iter()) {
                        *x -= dot * y;
                    }
                }
                let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                for x in c.iter_mut() {
                    *x /= norm;
                }
                basis.push(c);
            }
            Matrix::from_columns(&basis)
        };
        let u = gs((0..2).map(|_| (0..5).map(|_| rng.normal()).collect()).collect());
        let v = gs((0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect());
        let a1 = affinity(&u, &v).unwrap();
        let a2 = affinity(&v, &u).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&a1));
        // rotate u's basis: affinity unchanged
        let c = 0.6f64;
        let s = (1.0f64 - c * c).sqrt();
        let u_rot = Matrix::from_columns(&[
            u.col(0).iter().zip(u.col(1)).map(|(a, b)| c * a + s * b).collect(),
            u.col(0).iter().zip(u.col(1)).map(|(a, b)| -s * a + c * b).collect(),
        ]);
        let a3 = affinity(&u_rot, &v).unwrap();
        assert!((a1 - a3).abs() < 1e-10);
    }

    #[test]
    fn affinity_rejects_non_orthonormal() {
        let bad = Matrix::from_columns(&[vec![2.0, 0.0]]);
        let ok = Matrix::from_columns(&[vec![1.0, 0.0]]);
        assert!(matches!(
            affinity(&bad, &ok),
            Err(CoreError::InvalidArgument(_))
        ));
    }

    #[test]
    fn correlation_identical_and_orthogonal_columns() {
        let z = Matrix::from_columns(&[
            vec![2.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 3.0],
        ]);
        let part = ClassPartition::new(vec![0, 0, 1], 2).unwrap();
        let (corr, summary) = correlation_matrix(&z, &part).unwrap();
        assert!((corr.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(corr.get(0, 2).abs() < 1e-12);
        assert!((summary.within_class_mean - 1.0).abs() < 1e-12);
        assert!(summary.cross_class_mean.abs() < 1e-12);
    }

    #[test]
    fn correlation_rejects_zero_column() {
        let z = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let part = ClassPartition::new(vec![0, 1], 2).unwrap();
        assert!(correlation_matrix(&z, &part).is_err());
    }
}
