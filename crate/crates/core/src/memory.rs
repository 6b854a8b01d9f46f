//! The LDR memory: prototype features sampled along each class subspace's
//! top principal components, fitted subspace models, and store maintenance
//! including review-time replacement.

use crate::error::{CoreError, Result};
use crate::evalkit::affinity;
use crate::linalg::{top_eigenvectors, Matrix};

/// Principal-subspace model of one class: mean, orthonormal basis, estimated
/// dimension, and the leading singular values of the centered features.
#[derive(Clone, Debug)]
pub struct SubspaceModel {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub basis: Matrix,
    pub dim: usize,
    pub spectrum: Vec<f64>,
}

/// How the subspace dimension r_j is chosen when fitting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DimRule {
    Fixed(usize),
    /// Smallest r whose cumulative squared-singular-value energy reaches τ.
    Energy(f64),
}

impl Default for DimRule {
    fn default() -> Self {
        DimRule::Energy(0.95)
    }
}

/// Result of [`fit_subspace`]; `rank_clamped` flags a fixed dimension that
/// exceeded the numerical rank and was reduced.
#[derive(Clone, Debug)]
pub struct SubspaceFit {
    pub model: SubspaceModel,
    pub rank_clamped: bool,
}

/// One class's stored memory.
#[derive(Clone, Debug)]
pub struct ClassMemory {
    pub class_id: usize,
    pub prototypes: Matrix,
    pub model: SubspaceModel,
}

/// All stored class memories plus the sampling parameters they were built with.
#[derive(Clone, Debug, Default)]
pub struct PrototypeStore {
    classes: Vec<ClassMemory>,
    pub proto_m: usize,
    pub proto_r: usize,
}

impl PrototypeStore {
    pub fn new(proto_m: usize, proto_r: usize) -> Self {
        Self {
            classes: Vec::new(),
            proto_m,
            proto_r,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassMemory] {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn models(&self) -> Vec<&SubspaceModel> {
        self.classes.iter().map(|c| &c.model).collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassMemory> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Append a new class. Duplicate ids are a configuration error.
    pub fn append(&mut self, memory: ClassMemory) -> Result<()> {
        if self.get(memory.class_id).is_some() {
            return Err(CoreError::config(format!(
                "class {} already stored",
                memory.class_id
            )));
        }
        self.classes.push(memory);
        Ok(())
    }

    /// Total stored prototype columns.
    pub fn total_prototypes(&self) -> usize {
        self.classes.iter().map(|c| c.prototypes.cols()).sum()
    }
}

/// Sample m·r prototype columns from one class's features.
///
/// Takes the top-r eigenvectors of the uncentered second moment Z Zᵀ; for
/// each eigenvector ranks all columns by absolute projection score and keeps
/// the top m, skipping columns already selected (by index or by exact value)
/// in favor of the next-ranked one. Every output column is an exact input
/// column.
pub fn prototype_sampling(class_features: &Matrix, m: usize, r: usize) -> Result<Matrix> {
    if class_features.is_empty() {
        return Err(CoreError::arg("prototype_sampling: empty class"));
    }
    if m == 0 || r == 0 {
        return Err(CoreError::arg("prototype_sampling: m and r must be positive"));
    }
    let d = class_features.rows();
    let n = class_features.cols();
    if r > d {
        return Err(CoreError::arg(format!(
            "prototype_sampling: r={r} exceeds feature dimension {d}"
        )));
    }
    if n < m * r {
        return Err(CoreError::arg(format!(
            "prototype_sampling: class has {n} samples, need at least {}",
            m * r
        )));
    }

    let mut second_moment = class_features.matmul_transpose_other(class_features);
    for j in 0..d {
        for i in 0..j {
            let v = 0.5 * (second_moment.get(i, j) + second_moment.get(j, i));
            second_moment.set(i, j, v);
            second_moment.set(j, i, v);
        }
    }
    let spectral = top_eigenvectors(&second_moment, r)?;

    let mut taken = vec![false; n];
    let mut selected: Vec<usize> = Vec::with_capacity(m * r);
    for dir in 0..r {
        let v = spectral.eigenvectors.col(dir);
        // |vᵀ z_col| for every column, ranked descending, index ascending on ties
        let mut ranked: Vec<(usize, f64)> = (0..n)
            .map(|col| {
                let score: f64 = v
                    .iter()
                    .zip(class_features.col(col))
                    .map(|(a, b)| a * b)
                    .sum();
                (col, score.abs())
            })
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let mut picked = 0;
        for (col, _) in ranked {
            if picked == m {
                break;
            }
            if taken[col] {
                continue;
            }
            if selected
                .iter()
                .any(|&s| class_features.col(s) == class_features.col(col))
            {
                // a bitwise-identical column is already in the prototype set
                continue;
            }
            taken[col] = true;
            selected.push(col);
            picked += 1;
        }
        if picked < m {
            return Err(CoreError::arg(format!(
                "prototype_sampling: fewer than {} distinct samples available",
                m * r
            )));
        }
    }
    Ok(class_features.select_columns(&selected))
}

/// Fit a centered principal-subspace model to one class's features.
pub fn fit_subspace(class_id: usize, features: &Matrix, rule: DimRule) -> Result<SubspaceFit> {
    if features.is_empty() {
        return Err(CoreError::arg("fit_subspace: empty feature matrix"));
    }
    let d = features.rows();
    let mean = features.column_mean();
    let centered = features.subtract_column_vector(&mean);
    let mut cov = centered.matmul_transpose_other(&centered);
    for j in 0..d {
        for i in 0..j {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let spectral = top_eigenvectors(&cov, d)?;
    let eigenvalues: Vec<f64> = spectral
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0))
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    let rank = eigenvalues
        .iter()
        .filter(|&&v| v > 1e-12 * eigenvalues[0].max(1e-300))
        .count()
        .max(1);

    let (dim, rank_clamped) = match rule {
        DimRule::Fixed(r) => {
            if r == 0 || r > d {
                return Err(CoreError::arg(format!(
                    "fit_subspace: fixed dimension {r} out of range 1..={d}"
                )));
            }
            (r.min(rank), r > rank)
        }
        DimRule::Energy(tau) => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(CoreError::arg(format!(
                    "fit_subspace: energy threshold {tau} outside [0, 1]"
                )));
            }
            let mut acc = 0.0;
            let mut dim = rank;
            for (i, &v) in eigenvalues.iter().enumerate().take(rank) {
                acc += v;
                if total == 0.0 || acc >= tau * total {
                    dim = i + 1;
                    break;
                }
            }
            (dim, false)
        }
    };

    let spectrum: Vec<f64> = eigenvalues.iter().take(dim).map(|v| v.sqrt()).collect();
    let basis = spectral.eigenvectors.columns(0, dim);
    Ok(SubspaceFit {
        model: SubspaceModel {
            class_id,
            mean,
            basis,
            dim,
            spectrum,
        },
        rank_clamped,
    })
}

/// Outcome of a review replacement: which stored class was matched.
#[derive(Clone, Debug, PartialEq)]
pub struct ReviewReplacement {
    pub matched_class: usize,
    pub affinity: f64,
}

/// Replace the stored class whose subspace has the highest affinity to the
/// freshly fitted one. Ties within 1e-9 go to the lowest class id. The
/// replacement keeps the matched class id; only prototypes and model change.
pub fn update_after_review(
    store: &mut PrototypeStore,
    new_block: Matrix,
    new_model: SubspaceModel,
) -> Result<ReviewReplacement> {
    if store.is_empty() {
        return Err(CoreError::arg("update_after_review: empty store"));
    }
    let mut best: Option<(usize, f64)> = None;
    for class in store.classes.iter() {
        let a = affinity(&new_model.basis, &class.model.basis)?;
        let better = match best {
            None => true,
            // ties within 1e-9 go to the lowest class id
            Some((bid, ba)) => a > ba + 1e-9 || ((a - ba).abs() <= 1e-9 && class.class_id < bid),
        };
        if better {
            best = Some((class.class_id, a));
        }
    }
    let (matched_class, best_affinity) = best.unwrap();
    let slot = store
        .classes
        .iter_mut()
        .find(|c| c.class_id == matched_class)
        .unwrap();
    slot.prototypes = new_block;
    slot.model = SubspaceModel {
        class_id: matched_class,
        ..new_model
    };
    Ok(ReviewReplacement {
        matched_class,
        affinity: best_affinity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    #[test]
    fn sampling_picks_largest_projections() {
        // columns {3e1, 2e1, 0.5e1 + e2}, m=2, r=1 → {3e1, 2e1}
        let z = Matrix::from_columns(&[vec![3.0, 0.0], vec![2.0, 0.0], vec![0.5, 1.0]]);
        let block = prototype_sampling(&z, 2, 1).unwrap();
        assert_eq!(block.cols(), 2);
        assert_eq!(block.col(0), &[3.0, 0.0]);
        assert_eq!(block.col(1), &[2.0, 0.0]);
    }

    #[test]
    fn sampling_rejects_duplicate_degenerate_class() {
        let m = 3;
        let cols: Vec<Vec<f64>> = (0..3 * m).map(|_| vec![1.0, 0.0]).collect();
        let z = Matrix::from_columns(&cols);
        match prototype_sampling(&z, m, 1) {
            Err(CoreError::InvalidArgument(msg)) => {
                assert!(msg.contains("distinct"), "unexpected message {msg}")
            }
            other => panic!("expected argument error, got {other:?}"),
        }
    }

    #[test]
    fn sampling_rejects_too_few_samples() {
        let z = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(prototype_sampling(&z, 2, 2).is_err());
    }

    #[test]
    fn sampling_outputs_exact_input_columns() {
        let mut rng = RunRng::seed_from_u64(1);
        let z = Matrix::from_fn(6, 40, |_, _| rng.normal());
        let block = prototype_sampling(&z, 4, 3).unwrap();
        assert_eq!(block.cols(), 12);
        for j in 0..block.cols() {
            let found = (0..z.cols()).any(|c| z.col(c) == block.col(j));
            assert!(found, "prototype {j} is not an input column");
        }
        // deterministic
        let again = prototype_sampling(&z, 4, 3).unwrap();
        assert_eq!(block, again);
    }

    #[test]
    fn fit_line_class() {
        // Zj = {e1, −e1, 2e1}: μ=(2/3)e1, basis ±e1, dim 1
        let z = Matrix::from_columns(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0]]);
        let fit = fit_subspace(0, &z, DimRule::Energy(0.95)).unwrap();
        assert!(!fit.rank_clamped);
        let m = &fit.model;
        assert!((m.mean[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.mean[1].abs() < 1e-12);
        assert_eq!(m.dim, 1);
        assert!((m.basis.get(0, 0).abs() - 1.0).abs() < 1e-10);
        assert!(m.basis.get(1, 0).abs() < 1e-10);
    }

    #[test]
    fn fit_exact_plane_has_dim_two() {
        let z = Matrix::from_columns(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![-1.0, 0.5, 0.0],
        ]);
        let fit = fit_subspace(0, &z, DimRule::Energy(0.95)).unwrap();
        assert_eq!(fit.model.dim, 2);
    }

    #[test]
    fn fixed_rule_clamps_to_rank_with_warning() {
        // rank-1 centered data, ask for 12 dims in d=5
        let z = Matrix::from_columns(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0, 0.0, 0.0],
            vec![4.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        let fit = fit_subspace(0, &z, DimRule::Fixed(5)).unwrap();
        assert!(fit.rank_clamped);
        assert_eq!(fit.model.dim, 1);
    }

    #[test]
    fn fit_residual_nonincreasing_in_dim() {
        let mut rng = RunRng::seed_from_u64(7);
        let z = Matrix::from_fn(5, 30, |_, _| rng.normal());
        let mean = z.column_mean();
        let centered = z.subtract_column_vector(&mean);
        let mut last = f64::INFINITY;
        for r in 1..=5 {
            let fit = fit_subspace(0, &z, DimRule::Fixed(r)).unwrap();
            let proj = fit
                .model
                .basis
                .matmul(&fit.model.basis.matmul_transpose_self(&centered));
            let mut resid = centered.clone();
            resid.axpy(-1.0, &proj);
            let e = resid.frobenius_norm();
            assert!(e <= last + 1e-9, "residual grew at r={r}");
            last = e;
        }
    }

    fn line_model(class_id: usize, direction: Vec<f64>) -> SubspaceModel {
        let d = direction.len();
        SubspaceModel {
            class_id,
            mean: vec![0.0; d],
            basis: Matrix::from_columns(&[direction]),
            dim: 1,
            spectrum: vec![1.0],
        }
    }

    fn store_with_lines(dirs: &[(usize, Vec<f64>)]) -> PrototypeStore {
        let mut store = PrototypeStore::new(2, 1);
        for (id, dir) in dirs {
            store
                .append(ClassMemory {
                    class_id: *id,
                    prototypes: Matrix::from_columns(&[dir.clone(), dir.iter().map(|v| 2.0 * v).collect()]),
                    model: line_model(*id, dir.clone()),
                })
                .unwrap();
        }
        store
    }

    #[test]
    fn review_replaces_matching_class() {
        let mut store = store_with_lines(&[
            (0, vec![1.0, 0.0, 0.0]),
            (3, vec![0.0, 1.0, 0.0]),
            (5, vec![0.0, 0.0, 1.0]),
        ]);
        let new_block = Matrix::from_columns(&[vec![0.0, 3.0, 0.0], vec![0.0, -1.0, 0.0]]);
        let outcome =
            update_after_review(&mut store, new_block.clone(), line_model(99, vec![0.0, 1.0, 0.0]))
                .unwrap();
        assert_eq!(outcome.matched_class, 3);
        assert!((outcome.affinity - 1.0).abs() < 1e-12);
        let replaced = store.get(3).unwrap();
        assert_eq!(replaced.prototypes, new_block);
        assert_eq!(replaced.model.class_id, 3);
        // other classes untouched
        assert_eq!(store.get(0).unwrap().model.basis.get(0, 0), 1.0);
    }

    #[test]
    fn review_tie_goes_to_lowest_id() {
        let mut store = store_with_lines(&[(2, vec![1.0, 0.0]), (7, vec![0.0, 1.0])]);
        // perfectly diagonal: equal affinity to both lines
        let inv = 1.0 / 2.0f64.sqrt();
        let outcome = update_after_review(
            &mut store,
            Matrix::from_columns(&[vec![inv, inv]]),
            line_model(9, vec![inv, inv]),
        )
        .unwrap();
        assert_eq!(outcome.matched_class, 2);
    }

    #[test]
    fn store_rejects_duplicate_class() {
        let mut store = store_with_lines(&[(1, vec![1.0, 0.0])]);
        let err = store.append(ClassMemory {
            class_id: 1,
            prototypes: Matrix::zeros(2, 1),
            model: line_model(1, vec![0.0, 1.0]),
        });
        assert!(matches!(err, Err(CoreError::Config(_))));
    }
}
