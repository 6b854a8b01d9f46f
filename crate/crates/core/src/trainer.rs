//! The minimax optimization engine: joint LDR learning, incremental
//! learning with the old-memory constraint, and weakly supervised review
//! cycles.
//!
//! Every minibatch evaluates one objective and produces both gradient sets:
//! the encoder ascends
//!   ΔR(Z) + ΔR(Ẑ) + λ·ΔR(Z_new, Ẑ_new) − γ·ΔR(Z_old, Ẑ_old)
//! and the decoder descends the same expression with +γ. The two values are
//! identical when γ = 0 because a single evaluation backs both updates; the
//! θ step is applied first, then the η step.
//!
//! Gradients flow through the full closed loop X → Z → X̂ → Ẑ: the θ step
//! holds η fixed but backpropagates through the decoder, and symmetrically
//! for the η step. Stored prototypes Z_old are constants; only the networks
//! move during steps.

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::memory::{
    fit_subspace, prototype_sampling, update_after_review, ClassMemory, DimRule, PrototypeStore,
};
use crate::network::{
    adam_step, backward, commit_batchnorm, forward, forward_eval, AdamHyper, AdamState,
    ForwardCache, Mode, NetworkParams, ParamGrads,
};
use crate::evalkit::{evaluate_features, EvalOutcome, MetricsRecord};
use crate::dataio::{LabeledImages, TaskStream};
use crate::rate::{
    grad_pairwise_delta_r, grad_rate_reduction, pairwise_delta_r, rate_reduction, ClassPartition,
    RateConfig,
};
use crate::rng::{RngState, RunRng};

/// Lagrangian weights of the relaxed alternating objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// weight of the new-class transcription term
    pub lambda: f64,
    /// weight of the old-memory constraint term
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite())
            || !(self.gamma >= 0.0 && self.gamma.is_finite())
        {
            return Err(CoreError::arg(format!(
                "loss weights must be finite and non-negative, got λ={} γ={}",
                self.lambda, self.gamma
            )));
        }
        Ok(())
    }
}

/// Everything the training loops need to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    /// epochs spent on each class during one review; 0 makes review a no-op
    pub review_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rate: RateConfig,
    pub weights: LossWeights,
    pub adam: AdamHyper,
    /// prototype sampling: m features along each of r principal directions
    pub proto_m: usize,
    pub proto_r: usize,
    pub dim_rule: DimRule,
    /// per-class replay subsample per step; None replays the full store
    pub replay_per_class: Option<usize>,
    /// decoder updates per encoder update; 1 is the symmetric alternation
    pub decoder_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 30,
            review_epochs: 30,
            batch_size: 64,
            seed: 0,
            rate: RateConfig::default(),
            weights: LossWeights::default(),
            adam: AdamHyper::default(),
            proto_m: 20,
            proto_r: 12,
            dim_rule: DimRule::default(),
            replay_per_class: None,
            decoder_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(CoreError::config(
                "batch_size and epochs_per_task must be positive",
            ));
        }
        if self.proto_m == 0 || self.proto_r == 0 {
            return Err(CoreError::config("proto_m and proto_r must be positive"));
        }
        if self.decoder_steps == 0 {
            return Err(CoreError::config("decoder_steps must be positive"));
        }
        self.rate.validate()?;
        self.weights.validate()
    }
}

/// Per-step objective values and term breakdown.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub encoder_objective: f64,
    pub decoder_objective: f64,
    pub delta_r_z: f64,
    pub delta_r_zhat: f64,
    pub delta_r_new_pair: f64,
    pub delta_r_old_pair: f64,
}

/// Which loop a step belongs to, for metrics sinks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseKind {
    Joint { task: usize },
    Incremental { task: usize, class_id: usize },
    Review { cycle: usize, class_id: usize },
}

/// Receives one report per optimization step.
pub trait StepObserver {
    fn on_step(&mut self, phase: PhaseKind, report: &StepReport);
}

/// Ignores everything.
pub struct NullObserver;

impl StepObserver for NullObserver {
    fn on_step(&mut self, _phase: PhaseKind, _report: &StepReport) {}
}

/// Collects all reports in memory.
#[derive(Default)]
pub struct CollectObserver {
    pub steps: Vec<(PhaseKind, StepReport)>,
}

impl StepObserver for CollectObserver {
    fn on_step(&mut self, phase: PhaseKind, report: &StepReport) {
        self.steps.push((phase, *report));
    }
}

/// Project columns to the unit sphere; returns the projected matrix and the
/// original norms (needed by the backward pass).
fn normalize_columns(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let col = out.col_mut(j);
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in col.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    (out, norms)
}

/// Backward of the sphere projection: du = (dz − z (zᵀdz)) / ‖u‖ per column.
fn normalize_backward(z: &Matrix, norms: &[f64], dz: &Matrix) -> Matrix {
    let mut du = Matrix::zeros(z.rows(), z.cols());
    for j in 0..z.cols() {
        let zc = z.col(j);
        let dc = dz.col(j);
        let dot: f64 = zc.iter().zip(dc.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[j];
        let out = du.col_mut(j);
        for i in 0..zc.len() {
            out[i] = (dc[i] - zc[i] * dot) * inv;
        }
    }
    du
}

struct Projection {
    features: Matrix,
    norms: Option<Vec<f64>>,
}

fn project(m: Matrix, normalize: bool) -> Projection {
    if normalize {
        let (features, norms) = normalize_columns(&m);
        Projection {
            features,
            norms: Some(norms),
        }
    } else {
        Projection {
            features: m,
            norms: None,
        }
    }
}

fn project_backward(p: &Projection, dz: &Matrix) -> Matrix {
    match &p.norms {
        Some(norms) => normalize_backward(&p.features, norms, dz),
        None => dz.clone(),
    }
}

/// Objective values, term breakdown, and both gradient sets for one batch.
pub struct ObjectiveEval {
    pub report: StepReport,
    pub encoder_grads: ParamGrads,
    pub decoder_grads: ParamGrads,
    caches: StepCaches,
}

struct StepCaches {
    f_new: ForwardCache,
    g_new: ForwardCache,
    f_hat: ForwardCache,
}

/// One objective evaluation over a batch whose columns are grouped
/// contiguously by class (`batch_class_sizes`), plus replayed old blocks.
#[allow(clippy::too_many_arguments)]
fn evaluate_objective(
    enc: &NetworkParams,
    dec: &NetworkParams,
    batch: &Matrix,
    batch_class_sizes: &[(usize, usize)],
    old_blocks: &[(usize, &Matrix)],
    rate: &RateConfig,
    new_pair_weight: f64,
    gamma: f64,
) -> Result<ObjectiveEval> {
    if batch.cols() == 0 {
        return Err(CoreError::arg("evaluate_objective: empty batch"));
    }
    let normalize = rate.normalize_features;

    // closed loop on the new batch: x → z → x̂ → ẑ
    let (u_new, f_new_cache) = forward(enc, batch, Mode::Train)?;
    let z_new = project(u_new, normalize);
    let (x_hat, g_new_cache) = forward(dec, &z_new.features, Mode::Train)?;
    let (u_hat, f_hat_cache) = forward(enc, &x_hat, Mode::Train)?;
    let zhat_new = project(u_hat, normalize);

    // replay of the old memory: Z_old → X̂_old → Ẑ_old, with frozen statistics
    let replay = if old_blocks.is_empty() {
        None
    } else {
        let mut z_old_cat = old_blocks[0].1.clone();
        for (_, block) in &old_blocks[1..] {
            z_old_cat = z_old_cat.hstack(block);
        }
        let (x_hat_old, g_old_cache) = forward(dec, &z_old_cat, Mode::Eval)?;
        let (u_hat_old, f_old_cache) = forward(enc, &x_hat_old, Mode::Eval)?;
        let zhat_old = project(u_hat_old, normalize);
        Some((z_old_cat, g_old_cache, f_old_cache, zhat_old))
    };

    // assemble Z, Ẑ and the shared partition
    let mut sizes: Vec<usize> = batch_class_sizes.iter().map(|(_, n)| *n).collect();
    let (z_all, zhat_all) = match &replay {
        None => (z_new.features.clone(), zhat_new.features.clone()),
        Some((z_old_cat, _, _, zhat_old)) => {
            for (_, block) in old_blocks {
                sizes.push(block.cols());
            }
            (
                z_new.features.hstack(z_old_cat),
                zhat_new.features.hstack(&zhat_old.features),
            )
        }
    };
    let part = ClassPartition::from_block_sizes(&sizes)?;

    let dr_z = rate_reduction(&z_all, &part, rate)?;
    let dr_zhat = rate_reduction(&zhat_all, &part, rate)?;

    // per-class transcription distances on the new batch
    let mut dr_new_pair = 0.0;
    let mut gz_new = grad_rate_reduction(&z_all, &part, rate)?.columns(0, batch.cols());
    let gzhat = grad_rate_reduction(&zhat_all, &part, rate)?;
    let mut gzhat_new = gzhat.columns(0, batch.cols());
    {
        let mut offset = 0;
        for (_, count) in batch_class_sizes {
            let zc = z_new.features.columns(offset, offset + count);
            let zhc = zhat_new.features.columns(offset, offset + count);
            dr_new_pair += pairwise_delta_r(&zc, &zhc, rate)?;
            let (ga, gb) = grad_pairwise_delta_r(&zc, &zhc, rate)?;
            for local in 0..*count {
                let col = offset + local;
                for (dst, src) in gz_new.col_mut(col).iter_mut().zip(ga.col(local)) {
                    *dst += new_pair_weight * src;
                }
                for (dst, src) in gzhat_new.col_mut(col).iter_mut().zip(gb.col(local)) {
                    *dst += new_pair_weight * src;
                }
            }
            offset += count;
        }
    }

    // per-class constraint distances on the replayed memory
    let mut dr_old_pair = 0.0;
    let mut g_old_constraint: Option<Matrix> = None;
    if let Some((_, _, _, zhat_old)) = &replay {
        let mut g = Matrix::zeros(zhat_old.features.rows(), zhat_old.features.cols());
        let mut offset = 0;
        for (_, block) in old_blocks {
            let count = block.cols();
            let zhc = zhat_old.features.columns(offset, offset + count);
            dr_old_pair += pairwise_delta_r(block, &zhc, rate)?;
            // the stored block is constant; only the replayed side gets gradient
            let (_, gb) = grad_pairwise_delta_r(block, &zhc, rate)?;
            for local in 0..count {
                g.col_mut(offset + local).copy_from_slice(gb.col(local));
            }
            offset += count;
        }
        g_old_constraint = Some(g);
    }

    let base = dr_z + dr_zhat + new_pair_weight * dr_new_pair;
    let report = StepReport {
        step: 0,
        encoder_objective: base - gamma * dr_old_pair,
        decoder_objective: base + gamma * dr_old_pair,
        delta_r_z: dr_z,
        delta_r_zhat: dr_zhat,
        delta_r_new_pair: dr_new_pair,
        delta_r_old_pair: dr_old_pair,
    };

    // ---- backward assembly ----
    // shared path: dL/dẑ_new is identical for both objectives
    let du_hat = project_backward(&zhat_new, &gzhat_new);
    let (theta_f_hat, dx_hat) = backward(enc, &f_hat_cache, &du_hat)?;
    let (eta_g_new, dz_from_dec) = backward(dec, &g_new_cache, &dx_hat)?;

    let mut dz_total = gz_new;
    dz_total.axpy(1.0, &dz_from_dec);
    let du_new = project_backward(&z_new, &dz_total);
    let (theta_f_new, _) = backward(enc, &f_new_cache, &du_new)?;

    let mut encoder_grads = theta_f_new;
    encoder_grads.add_assign(&theta_f_hat);
    let mut decoder_grads = eta_g_new;

    if let Some((_, g_old_cache, f_old_cache, zhat_old)) = &replay {
        let g_constraint = g_old_constraint.as_ref().unwrap();
        let gzhat_old_common = gzhat.columns(batch.cols(), gzhat.cols());

        // θ side: ΔR(Ẑ) part − γ · constraint part
        let mut d_theta = gzhat_old_common.clone();
        d_theta.axpy(-gamma, g_constraint);
        let du = project_backward(zhat_old, &d_theta);
        let (theta_f_old, _) = backward(enc, f_old_cache, &du)?;
        encoder_grads.add_assign(&theta_f_old);

        // η side: ΔR(Ẑ) part + γ · constraint part
        let mut d_eta = gzhat_old_common;
        d_eta.axpy(gamma, g_constraint);
        let du = project_backward(zhat_old, &d_eta);
        let (_, dx_hat_old) = backward(enc, f_old_cache, &du)?;
        let (eta_g_old, _) = backward(dec, g_old_cache, &dx_hat_old)?;
        decoder_grads.add_assign(&eta_g_old);
    }

    Ok(ObjectiveEval {
        report,
        encoder_grads,
        decoder_grads,
        caches: StepCaches {
            f_new: f_new_cache,
            g_new: g_new_cache,
            f_hat: f_hat_cache,
        },
    })
}

/// Objective evaluation for one minibatch of the current task against the
/// stored memory: values, term breakdown, and both gradient sets. The batch
/// is treated as a single new class; the full store is replayed.
pub fn compute_objectives(
    batch_new: &Matrix,
    store: &PrototypeStore,
    enc: &NetworkParams,
    dec: &NetworkParams,
    cfg: &TrainConfig,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    let old: Vec<(usize, &Matrix)> = store
        .classes()
        .iter()
        .map(|c| (c.class_id, &c.prototypes))
        .collect();
    evaluate_objective(
        enc,
        dec,
        batch_new,
        &[(usize::MAX, batch_new.cols())],
        &old,
        &cfg.rate,
        cfg.weights.lambda,
        cfg.weights.gamma,
    )
}

/// Mutable bundle for one training run.
pub struct TrainerState<'a> {
    pub enc: &'a mut NetworkParams,
    pub dec: &'a mut NetworkParams,
    pub adam_enc: &'a mut AdamState,
    pub adam_dec: &'a mut AdamState,
    pub rng: &'a mut RunRng,
    pub step: &'a mut u64,
}

fn check_finite(report: &StepReport, grads: &ParamGrads) -> Result<()> {
    if !report.encoder_objective.is_finite()
        || !report.decoder_objective.is_finite()
        || !grads.is_finite()
    {
        return Err(CoreError::Diverged {
            step: report.step,
            detail: format!(
                "encoder {} decoder {}",
                report.encoder_objective, report.decoder_objective
            ),
        });
    }
    Ok(())
}

/// One alternating minimax step: the encoder ascends its objective, then the
/// decoder descends a fresh evaluation at the updated encoder. The reported
/// values come from the first evaluation, where both objectives are measured
/// at the same parameters.
#[allow(clippy::too_many_arguments)]
fn minimax_step(
    state: &mut TrainerState,
    batch: &Matrix,
    batch_class_sizes: &[(usize, usize)],
    old_blocks: &[(usize, &Matrix)],
    cfg: &TrainConfig,
    new_pair_weight: f64,
    phase: PhaseKind,
    observer: &mut dyn StepObserver,
) -> Result<StepReport> {
    *state.step += 1;

    let eval = evaluate_objective(
        state.enc,
        state.dec,
        batch,
        batch_class_sizes,
        old_blocks,
        &cfg.rate,
        new_pair_weight,
        cfg.weights.gamma,
    )?;
    let mut report = eval.report;
    report.step = *state.step;
    check_finite(&report, &eval.encoder_grads)?;
    let mut ascent = eval.encoder_grads;
    ascent.scale(-1.0);
    adam_step(state.enc, &ascent, state.adam_enc)?;
    commit_batchnorm(state.enc, &eval.caches.f_new);
    commit_batchnorm(state.dec, &eval.caches.g_new);
    commit_batchnorm(state.enc, &eval.caches.f_hat);

    for _ in 0..cfg.decoder_steps {
        let eval2 = evaluate_objective(
            state.enc,
            state.dec,
            batch,
            batch_class_sizes,
            old_blocks,
            &cfg.rate,
            new_pair_weight,
            cfg.weights.gamma,
        )?;
        let mut report2 = eval2.report;
        report2.step = *state.step;
        check_finite(&report2, &eval2.decoder_grads)?;
        adam_step(state.dec, &eval2.decoder_grads, state.adam_dec)?;
        commit_batchnorm(state.enc, &eval2.caches.f_new);
        commit_batchnorm(state.dec, &eval2.caches.g_new);
        commit_batchnorm(state.enc, &eval2.caches.f_hat);
    }

    observer.on_step(phase, &report);
    Ok(report)
}

/// Deterministic shuffled minibatch index lists for one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut RunRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect()
}

fn subsample_store<'a>(
    store: &'a PrototypeStore,
    per_class: Option<usize>,
    rng: &mut RunRng,
) -> Vec<(usize, Matrix)> {
    store
        .classes()
        .iter()
        .map(|class| {
            let block = match per_class {
                Some(limit) if class.prototypes.cols() > limit => {
                    let idx = rng.sample_indices(class.prototypes.cols(), limit);
                    class.prototypes.select_columns(&idx)
                }
                _ => class.prototypes.clone(),
            };
            (class.class_id, block)
        })
        .collect()
}

/// Encode a dataset through the encoder in eval mode, applying the trainer's
/// feature normalization when configured.
pub fn encode_features(enc: &NetworkParams, data: &Matrix, rate: &RateConfig) -> Result<Matrix> {
    let mut cols: Vec<Matrix> = Vec::new();
    let chunk = 512;
    let mut start = 0;
    while start < data.cols() {
        let end = (start + chunk).min(data.cols());
        let u = forward_eval(enc, &data.columns(start, end))?;
        cols.push(if rate.normalize_features {
            normalize_columns(&u).0
        } else {
            u
        });
        start = end;
    }
    let mut out = cols.remove(0);
    for c in cols {
        out = out.hstack(&c);
    }
    Ok(out)
}

/// Joint minimax training over a labeled multi-class set:
/// θ ascends and η descends ΔR(Z) + ΔR(Ẑ) + Σ_j ΔR(Z_j, Ẑ_j).
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    state: &mut TrainerState,
    classes: &[(usize, Matrix)],
    epochs: usize,
    cfg: &TrainConfig,
    task_index: usize,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    if classes.len() < 2 {
        return Err(CoreError::arg("train_joint: need at least 2 classes"));
    }
    let mut data = classes[0].1.clone();
    let mut labels: Vec<usize> = vec![0; classes[0].1.cols()];
    for (slot, (_, block)) in classes.iter().enumerate().skip(1) {
        data = data.hstack(block);
        labels.extend(std::iter::repeat(slot).take(block.cols()));
    }
    for _epoch in 0..epochs {
        for batch_idx in epoch_batches(data.cols(), cfg.batch_size, state.rng) {
            // group the minibatch contiguously by class (stable order)
            let mut grouped = batch_idx.clone();
            grouped.sort_by_key(|&i| labels[i]);
            let batch = data.select_columns(&grouped);
            let mut sizes: Vec<(usize, usize)> = Vec::new();
            for &i in &grouped {
                let class_id = classes[labels[i]].0;
                match sizes.last_mut() {
                    Some((id, count)) if *id == class_id => *count += 1,
                    _ => sizes.push((class_id, 1)),
                }
            }
            minimax_step(
                state,
                &batch,
                &sizes,
                &[],
                cfg,
                1.0,
                PhaseKind::Joint { task: task_index },
                observer,
            )?;
        }
    }
    Ok(())
}

/// Constrained minimax session for one new class against the stored memory.
#[allow(clippy::too_many_arguments)]
fn train_single_class(
    state: &mut TrainerState,
    store: &PrototypeStore,
    class_id: usize,
    data: &Matrix,
    epochs: usize,
    cfg: &TrainConfig,
    phase: impl Fn(usize) -> PhaseKind,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    for _epoch in 0..epochs {
        for batch_idx in epoch_batches(data.cols(), cfg.batch_size, state.rng) {
            let batch = data.select_columns(&batch_idx);
            let old = subsample_store(store, cfg.replay_per_class, state.rng);
            let old_refs: Vec<(usize, &Matrix)> = old.iter().map(|(id, b)| (*id, b)).collect();
            minimax_step(
                state,
                &batch,
                &[(class_id, batch.cols())],
                &old_refs,
                cfg,
                cfg.weights.lambda,
                phase(class_id),
                observer,
            )?;
        }
    }
    Ok(())
}

/// Sample prototypes and fit the subspace model for a freshly learned class.
fn memorize_class(
    state: &mut TrainerState,
    store: &mut PrototypeStore,
    class_id: usize,
    data: &Matrix,
    cfg: &TrainConfig,
) -> Result<()> {
    let features = encode_features(state.enc, data, &cfg.rate)?;
    let prototypes = prototype_sampling(&features, cfg.proto_m, cfg.proto_r)?;
    let fit = fit_subspace(class_id, &features, cfg.dim_rule)?;
    store.append(ClassMemory {
        class_id,
        prototypes,
        model: fit.model,
    })
}

/// One incremental task: the task's classes are learned one at a time in
/// ascending id order; each class's prototypes join the store before the
/// next class starts, so classes within a task stay separated.
#[allow(clippy::too_many_arguments)]
pub fn train_incremental_task(
    state: &mut TrainerState,
    store: &mut PrototypeStore,
    task: &crate::dataio::Task,
    task_index: usize,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    for (class_id, data) in &task.classes {
        train_single_class(
            state,
            store,
            *class_id,
            data,
            cfg.epochs_per_task,
            cfg,
            |class_id| PhaseKind::Incremental {
                task: task_index,
                class_id,
            },
            observer,
        )?;
        memorize_class(state, store, *class_id, data, cfg)?;
    }
    Ok(())
}

/// What an accuracy checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointLabel {
    Task(usize),
    ReviewCycle(usize),
}

/// Accuracy snapshot taken after a task or a review cycle.
#[derive(Clone, Debug)]
pub struct AccuracyCheckpoint {
    pub label: CheckpointLabel,
    pub classes_seen: Vec<usize>,
    pub outcome: EvalOutcome,
}

/// Everything a run accumulates besides the network parameters. Persisting
/// this plus the two networks is enough to resume a run exactly.
pub struct RunState {
    pub store: PrototypeStore,
    pub adam_enc: AdamState,
    pub adam_dec: AdamState,
    pub metrics: MetricsRecord,
    pub checkpoints: Vec<AccuracyCheckpoint>,
    pub rng_state: RngState,
    pub steps: u64,
    pub tasks_done: usize,
    pub review_cycles_done: usize,
}

impl RunState {
    pub fn fresh(enc: &NetworkParams, dec: &NetworkParams, cfg: &TrainConfig) -> Self {
        Self {
            store: PrototypeStore::new(cfg.proto_m, cfg.proto_r),
            adam_enc: AdamState::new(enc, cfg.adam),
            adam_dec: AdamState::new(dec, cfg.adam),
            metrics: MetricsRecord::default(),
            checkpoints: Vec::new(),
            rng_state: RunRng::seed_from_u64(cfg.seed).state(),
            steps: 0,
            tasks_done: 0,
            review_cycles_done: 0,
        }
    }
}

/// Evaluate the store's models on the eval split restricted to seen classes.
pub fn evaluate_checkpoint(
    enc: &NetworkParams,
    store: &PrototypeStore,
    eval_set: &LabeledImages,
    rate: &RateConfig,
) -> Result<EvalOutcome> {
    let seen = store.class_ids();
    let subset = eval_set.filter_classes(&seen);
    if subset.is_empty() {
        return Err(CoreError::arg("evaluate_checkpoint: no eval samples for seen classes"));
    }
    let features = encode_features(enc, &subset.data, rate)?;
    evaluate_features(&features, &subset.labels, &store.models())
}

/// Run every task not yet covered by `run.tasks_done`: joint training on
/// the first task, constrained incremental learning afterwards, prototype
/// sampling per class, and an accuracy checkpoint after every task. Resuming
/// from a persisted [`RunState`] reproduces the unbroken run exactly.
pub fn advance_incremental(
    enc: &mut NetworkParams,
    dec: &mut NetworkParams,
    run: &mut RunState,
    stream: &TaskStream,
    eval_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    cfg.validate()?;
    let ids = stream.all_class_ids();
    {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(CoreError::config(
                "duplicate class ids across tasks".to_string(),
            ));
        }
    }
    if stream.tasks.is_empty() {
        return Err(CoreError::config("empty task stream"));
    }
    if run.tasks_done > stream.tasks.len() {
        return Err(CoreError::config(format!(
            "run already covers {} tasks, stream has {}",
            run.tasks_done,
            stream.tasks.len()
        )));
    }

    let mut rng = RunRng::restore(&run.rng_state);
    let mut step = run.steps;
    for task_index in run.tasks_done..stream.tasks.len() {
        let task = &stream.tasks[task_index];
        {
            let mut state = TrainerState {
                enc,
                dec,
                adam_enc: &mut run.adam_enc,
                adam_dec: &mut run.adam_dec,
                rng: &mut rng,
                step: &mut step,
            };
            if task_index == 0 && task.classes.len() >= 2 {
                train_joint(
                    &mut state,
                    &task.classes,
                    cfg.epochs_per_task,
                    cfg,
                    task_index,
                    observer,
                )?;
                for (class_id, data) in &task.classes {
                    memorize_class(&mut state, &mut run.store, *class_id, data, cfg)?;
                }
            } else {
                train_incremental_task(&mut state, &mut run.store, task, task_index, cfg, observer)?;
            }
        }

        if let Some(eval_set) = eval_set {
            let outcome = evaluate_checkpoint(enc, &run.store, eval_set, &cfg.rate)?;
            run.metrics.push_checkpoint(&outcome);
            run.checkpoints.push(AccuracyCheckpoint {
                label: CheckpointLabel::Task(task_index),
                classes_seen: run.store.class_ids(),
                outcome,
            });
        }
        run.tasks_done = task_index + 1;
        run.steps = step;
        run.rng_state = rng.state();
    }
    Ok(())
}

/// Fresh incremental run over the whole stream.
pub fn run_incremental(
    enc: &mut NetworkParams,
    dec: &mut NetworkParams,
    stream: &TaskStream,
    eval_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<RunState> {
    let mut run = RunState::fresh(enc, dec, cfg);
    advance_incremental(enc, dec, &mut run, stream, eval_set, cfg, observer)?;
    Ok(run)
}

/// What one review cycle did to each class.
#[derive(Clone, Debug)]
pub struct ReviewIdentification {
    pub reviewed_class: usize,
    pub matched_class: usize,
    pub affinity: f64,
}

/// One weakly supervised review cycle: every class is revisited once, in
/// ascending id order, as if it were new data — its label is never used in
/// the objective. After each class's session, the newly learned subspace is
/// matched against the store by affinity and replaces the matched class.
/// With `review_epochs == 0` the cycle is a no-op and the store is untouched.
#[allow(clippy::too_many_arguments)]
pub fn review_cycle(
    state: &mut TrainerState,
    store: &mut PrototypeStore,
    class_data: &[(usize, Matrix)],
    cycle_index: usize,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<Vec<ReviewIdentification>> {
    cfg.validate()?;
    if cfg.review_epochs == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..class_data.len()).collect();
    order.sort_by_key(|&i| class_data[i].0);

    let mut identifications = Vec::new();
    for idx in order {
        let (class_id, data) = &class_data[idx];
        train_single_class(
            state,
            store,
            *class_id,
            data,
            cfg.review_epochs,
            cfg,
            |class_id| PhaseKind::Review {
                cycle: cycle_index,
                class_id,
            },
            observer,
        )?;
        let features = encode_features(state.enc, data, &cfg.rate)?;
        let prototypes = prototype_sampling(&features, cfg.proto_m, cfg.proto_r)?;
        let fit = fit_subspace(*class_id, &features, cfg.dim_rule)?;
        let replacement = update_after_review(store, prototypes, fit.model)?;
        identifications.push(ReviewIdentification {
            reviewed_class: *class_id,
            matched_class: replacement.matched_class,
            affinity: replacement.affinity,
        });
    }
    Ok(identifications)
}

/// Run `cycles` review cycles over all learned classes, recording an accuracy
/// checkpoint after each cycle.
#[allow(clippy::too_many_arguments)]
pub fn run_review(
    enc: &mut NetworkParams,
    dec: &mut NetworkParams,
    run: &mut RunState,
    class_data: &[(usize, Matrix)],
    cycles: usize,
    eval_set: Option<&LabeledImages>,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<Vec<ReviewIdentification>> {
    let mut all = Vec::new();
    for _ in 0..cycles {
        let cycle_index = run.review_cycles_done;
        let mut rng = RunRng::restore(&run.rng_state);
        let mut step = run.steps;
        {
            let mut state = TrainerState {
                enc,
                dec,
                adam_enc: &mut run.adam_enc,
                adam_dec: &mut run.adam_dec,
                rng: &mut rng,
                step: &mut step,
            };
            let ids = review_cycle(
                &mut state,
                &mut run.store,
                class_data,
                cycle_index,
                cfg,
                observer,
            )?;
            all.extend(ids);
        }
        run.steps = step;
        run.rng_state = rng.state();
        run.review_cycles_done = cycle_index + 1;
        if let Some(eval_set) = eval_set {
            // review accuracy is recorded as its own checkpoint row; the
            // task-average (iCaRL convention) stays a mean over task rows
            let outcome = evaluate_checkpoint(enc, &run.store, eval_set, &cfg.rate)?;
            run.checkpoints.push(AccuracyCheckpoint {
                label: CheckpointLabel::ReviewCycle(cycle_index),
                classes_seen: run.store.class_ids(),
                outcome,
            });
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{split_tasks, synth_subspace_data};
    use crate::network::{dense_decoder_specs, dense_encoder_specs, init_params, Shape};

    fn toy_nets(input: usize, nz: usize, seed: u64) -> (NetworkParams, NetworkParams) {
        let enc = init_params(&dense_encoder_specs(input, &[16], nz), Shape::Flat(input), seed)
            .unwrap();
        let dec = init_params(
            &dense_decoder_specs(nz, &[16], input),
            Shape::Flat(nz),
            seed + 1,
        )
        .unwrap();
        (enc, dec)
    }

    fn toy_store(enc: &NetworkParams, cfg: &TrainConfig, blocks: &[(usize, Matrix)]) -> PrototypeStore {
        let mut store = PrototypeStore::new(cfg.proto_m, cfg.proto_r);
        for (id, data) in blocks {
            let features = encode_features(enc, data, &cfg.rate).unwrap();
            let prototypes =
                prototype_sampling(&features, cfg.proto_m, cfg.proto_r).unwrap();
            let fit = fit_subspace(*id, &features, cfg.dim_rule).unwrap();
            store
                .append(ClassMemory {
                    class_id: *id,
                    prototypes,
                    model: fit.model,
                })
                .unwrap();
        }
        store
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs_per_task: 2,
            review_epochs: 1,
            batch_size: 8,
            proto_m: 4,
            proto_r: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gamma_zero_objectives_coincide() {
        let (enc, dec) = toy_nets(6, 4, 3);
        let mut cfg = small_cfg();
        cfg.weights.gamma = 0.0;
        let data = synth_subspace_data(2, 6, 1, 16, 0.05, 1).unwrap();
        let store = toy_store(&enc, &cfg, &[(0, data.class_block(0))]);
        let batch = data.class_block(1).columns(0, 8);
        let eval = compute_objectives(&batch, &store, &enc, &dec, &cfg).unwrap();
        assert_eq!(eval.report.encoder_objective, eval.report.decoder_objective);
        assert!(eval.report.delta_r_old_pair >= -1e-12);
    }

    #[test]
    fn empty_store_single_class_terms() {
        let (enc, dec) = toy_nets(6, 4, 5);
        let cfg = small_cfg();
        let store = PrototypeStore::new(cfg.proto_m, cfg.proto_r);
        let data = synth_subspace_data(1, 6, 1, 12, 0.05, 2).unwrap();
        let batch = data.class_block(0).columns(0, 8);
        let eval = compute_objectives(&batch, &store, &enc, &dec, &cfg).unwrap();
        // single class: ΔR(Z) is exactly zero, and there is no old term
        assert_eq!(eval.report.delta_r_z, 0.0);
        assert_eq!(eval.report.delta_r_old_pair, 0.0);
        assert!(eval.report.delta_r_new_pair.is_finite());
    }

    #[test]
    fn objective_gradients_match_finite_differences_end_to_end() {
        // toy closed loop with a stored class; checks dθ and dη of both objectives
        let (enc, dec) = toy_nets(5, 3, 11);
        let mut cfg = small_cfg();
        cfg.proto_m = 3;
        cfg.proto_r = 1;
        let data = synth_subspace_data(2, 5, 1, 8, 0.1, 7).unwrap();
        let store = toy_store(&enc, &cfg, &[(0, data.class_block(0))]);
        let batch = data.class_block(1).columns(0, 6);

        let eval = compute_objectives(&batch, &store, &enc, &dec, &cfg).unwrap();

        let value = |enc: &NetworkParams, dec: &NetworkParams| -> (f64, f64) {
            let e = compute_objectives(&batch, &store, enc, dec, &cfg).unwrap();
            (e.report.encoder_objective, e.report.decoder_objective)
        };

        let h = 1e-5;
        let mut worst = 0.0f64;
        // θ gradients against the encoder objective
        for ti in 0..enc.trainable_tensors().len() {
            for i in (0..enc.trainable_tensors()[ti].len()).step_by(7) {
                let mut plus = enc.clone();
                plus.trainable_tensors_mut()[ti][i] += h;
                let mut minus = enc.clone();
                minus.trainable_tensors_mut()[ti][i] -= h;
                let fd = (value(&plus, &dec).0 - value(&minus, &dec).0) / (2.0 * h);
                let analytic = eval.encoder_grads.tensors()[ti][i];
                let denom = fd.abs().max(analytic.abs()).max(1e-3);
                worst = worst.max((fd - analytic).abs() / denom);
            }
        }
        // η gradients against the decoder objective
        for ti in 0..dec.trainable_tensors().len() {
            for i in (0..dec.trainable_tensors()[ti].len()).step_by(7) {
                let mut plus = dec.clone();
                plus.trainable_tensors_mut()[ti][i] += h;
                let mut minus = dec.clone();
                minus.trainable_tensors_mut()[ti][i] -= h;
                let fd = (value(&enc, &plus).1 - value(&enc, &minus).1) / (2.0 * h);
                let analytic = eval.decoder_grads.tensors()[ti][i];
                let denom = fd.abs().max(analytic.abs()).max(1e-3);
                worst = worst.max((fd - analytic).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn incremental_run_bookkeeping_and_determinism() {
        let data = synth_subspace_data(4, 12, 2, 24, 0.02, 13).unwrap();
        let stream = split_tasks(&data, 2).unwrap();
        let cfg = TrainConfig {
            epochs_per_task: 2,
            batch_size: 8,
            proto_m: 4,
            proto_r: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut enc, mut dec) = toy_nets(12, 6, 7);
            let mut observer = CollectObserver::default();
            let out = run_incremental(&mut enc, &mut dec, &stream, Some(&data), &cfg, &mut observer)
                .unwrap();
            (out, observer)
        };
        let (a, obs_a) = run();
        let (b, obs_b) = run();
        assert_eq!(a.store.len(), 4);
        for class in a.store.classes() {
            assert_eq!(class.prototypes.cols(), cfg.proto_m * cfg.proto_r);
        }
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.steps, b.steps);
        assert_eq!(obs_a.steps.len(), obs_b.steps.len());
        for (x, y) in obs_a.steps.iter().zip(obs_b.steps.iter()) {
            assert_eq!(x, y, "step streams must be bit-identical");
        }
    }

    #[test]
    fn resume_reproduces_unbroken_run() {
        let data = synth_subspace_data(4, 12, 2, 24, 0.02, 17).unwrap();
        let stream = split_tasks(&data, 2).unwrap();
        let cfg = TrainConfig {
            epochs_per_task: 2,
            batch_size: 8,
            proto_m: 4,
            proto_r: 2,
            seed: 3,
            ..TrainConfig::default()
        };

        let (mut enc_a, mut dec_a) = toy_nets(12, 6, 21);
        let mut obs_a = CollectObserver::default();
        let run_a =
            run_incremental(&mut enc_a, &mut dec_a, &stream, Some(&data), &cfg, &mut obs_a)
                .unwrap();

        // broken run: stop after task 1, then resume
        let (mut enc_b, mut dec_b) = toy_nets(12, 6, 21);
        let mut run_b = RunState::fresh(&enc_b, &dec_b, &cfg);
        let partial = TaskStream {
            tasks: vec![stream.tasks[0].clone()],
        };
        let mut obs_b = CollectObserver::default();
        advance_incremental(&mut enc_b, &mut dec_b, &mut run_b, &partial, Some(&data), &cfg, &mut obs_b)
            .unwrap();
        advance_incremental(&mut enc_b, &mut dec_b, &mut run_b, &stream, Some(&data), &cfg, &mut obs_b)
            .unwrap();

        assert_eq!(enc_a, enc_b);
        assert_eq!(dec_a, dec_b);
        assert_eq!(run_a.steps, run_b.steps);
        assert_eq!(run_a.rng_state, run_b.rng_state);
        assert_eq!(obs_a.steps, obs_b.steps);
        assert_eq!(
            run_a.metrics.per_task, run_b.metrics.per_task,
            "accuracy history must match"
        );
    }

    #[test]
    fn duplicate_class_ids_rejected() {
        let data = synth_subspace_data(2, 8, 1, 12, 0.02, 1).unwrap();
        let mut stream = split_tasks(&data, 2).unwrap();
        // corrupt: duplicate class 0 in the second task
        stream.tasks[1].classes[0].0 = 0;
        let (mut enc, mut dec) = toy_nets(8, 4, 1);
        let err = run_incremental(
            &mut enc,
            &mut dec,
            &stream,
            None,
            &small_cfg(),
            &mut NullObserver,
        );
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn zero_epoch_review_is_a_noop() {
        let data = synth_subspace_data(2, 8, 1, 16, 0.02, 3).unwrap();
        let stream = split_tasks(&data, 1).unwrap();
        let mut cfg = small_cfg();
        cfg.review_epochs = 0;
        let (mut enc, mut dec) = toy_nets(8, 4, 9);
        let out = run_incremental(&mut enc, &mut dec, &stream, Some(&data), &cfg, &mut NullObserver)
            .unwrap();
        let mut store = out.store;
        let before: Vec<Matrix> = store.classes().iter().map(|c| c.prototypes.clone()).collect();
        let acc_before = evaluate_checkpoint(&enc, &store, &data, &cfg.rate)
            .unwrap()
            .overall_accuracy;

        let mut adam_enc = out.adam_enc;
        let mut adam_dec = out.adam_dec;
        let mut rng = RunRng::restore(&out.rng_state);
        let mut step = out.steps;
        let mut state = TrainerState {
            enc: &mut enc,
            dec: &mut dec,
            adam_enc: &mut adam_enc,
            adam_dec: &mut adam_dec,
            rng: &mut rng,
            step: &mut step,
        };
        let class_data: Vec<(usize, Matrix)> =
            (0..2).map(|c| (c, data.class_block(c))).collect();
        let ids = review_cycle(&mut state, &mut store, &class_data, 0, &cfg, &mut NullObserver)
            .unwrap();
        assert!(ids.is_empty());
        for (class, block) in store.classes().iter().zip(before.iter()) {
            assert_eq!(&class.prototypes, block);
        }
        let acc_after = evaluate_checkpoint(&enc, &store, &data, &cfg.rate)
            .unwrap()
            .overall_accuracy;
        assert_eq!(acc_before, acc_after);
    }

    #[test]
    fn prototypes_unchanged_by_training_steps() {
        let data = synth_subspace_data(2, 8, 1, 16, 0.02, 3).unwrap();
        let (mut enc, mut dec) = toy_nets(8, 4, 2);
        let cfg = small_cfg();
        let store = toy_store(&enc, &cfg, &[(0, data.class_block(0))]);
        let snapshot: Vec<Matrix> = store.classes().iter().map(|c| c.prototypes.clone()).collect();
        let mut adam_enc = AdamState::new(&enc, cfg.adam);
        let mut adam_dec = AdamState::new(&dec, cfg.adam);
        let mut rng = RunRng::seed_from_u64(0);
        let mut step = 0;
        let mut state = TrainerState {
            enc: &mut enc,
            dec: &mut dec,
            adam_enc: &mut adam_enc,
            adam_dec: &mut adam_dec,
            rng: &mut rng,
            step: &mut step,
        };
        train_single_class(
            &mut state,
            &store,
            1,
            &data.class_block(1),
            2,
            &cfg,
            |class_id| PhaseKind::Incremental { task: 1, class_id },
            &mut NullObserver,
        )
        .unwrap();
        for (class, before) in store.classes().iter().zip(snapshot.iter()) {
            assert_eq!(&class.prototypes, before);
        }
    }
}
