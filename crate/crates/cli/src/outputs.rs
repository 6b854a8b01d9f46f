//! Metrics and artifact emission: metrics.csv (per-step term breakdown),
//! accuracy.csv (per-checkpoint rows), summary.json, affinity/correlation
//! CSV grids. Column layouts are fixed; their schema version is recorded in
//! summary.json.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ildr_core::evalkit::CorrelationSummary;
use ildr_core::linalg::Matrix;
use ildr_core::trainer::{
    AccuracyCheckpoint, CheckpointLabel, PhaseKind, ReviewIdentification, StepObserver, StepReport,
};

use crate::CliError;

pub const METRICS_SCHEMA: u32 = 1;
pub const ACCURACY_SCHEMA: u32 = 1;

pub const METRICS_HEADER: &str = "step,phase,task_or_cycle,class,encoder_objective,decoder_objective,delta_r_z,delta_r_zhat,delta_r_new_pair,delta_r_old_pair";
pub const ACCURACY_HEADER: &str =
    "row,kind,index,classes_seen,overall_accuracy,average_incremental_accuracy";

/// Streams step reports into metrics.csv as they happen.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.out.flush()?;
        Ok(())
    }
}

impl StepObserver for MetricsCsv {
    fn on_step(&mut self, phase: PhaseKind, report: &StepReport) {
        let (phase_name, index, class): (&str, i64, i64) = match phase {
            PhaseKind::Joint { task } => ("joint", task as i64, -1),
            PhaseKind::Incremental { task, class_id } => {
                ("incremental", task as i64, class_id as i64)
            }
            PhaseKind::Review { cycle, class_id } => ("review", cycle as i64, class_id as i64),
        };
        // writer errors surface at flush time
        let _ = writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{}",
            report.step,
            phase_name,
            index,
            class,
            report.encoder_objective,
            report.decoder_objective,
            report.delta_r_z,
            report.delta_r_zhat,
            report.delta_r_new_pair,
            report.delta_r_old_pair
        );
    }
}

/// Rewrite accuracy.csv from the full checkpoint history. The running
/// average column follows the incremental-accuracy convention: the mean of
/// task-checkpoint accuracies seen so far (review rows repeat the latest).
pub fn write_accuracy_csv(path: &Path, checkpoints: &[AccuracyCheckpoint]) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{ACCURACY_HEADER}")?;
    let mut task_acc_sum = 0.0;
    let mut task_rows = 0usize;
    for (row, cp) in checkpoints.iter().enumerate() {
        let (kind, index) = match cp.label {
            CheckpointLabel::Task(i) => {
                task_acc_sum += cp.outcome.overall_accuracy;
                task_rows += 1;
                ("task", i)
            }
            CheckpointLabel::ReviewCycle(i) => ("review", i),
        };
        let avg = if task_rows > 0 {
            task_acc_sum / task_rows as f64
        } else {
            0.0
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row,
            kind,
            index,
            cp.classes_seen.len(),
            cp.outcome.overall_accuracy,
            avg
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct Summary {
    pub schema: u32,
    pub metrics_csv_schema: u32,
    pub accuracy_csv_schema: u32,
    pub seed: u64,
    pub config: std::collections::BTreeMap<String, String>,
    pub steps: u64,
    pub tasks_done: usize,
    pub review_cycles_done: usize,
    pub per_task_accuracy: Vec<f64>,
    pub last_accuracy: Option<f64>,
    pub average_incremental_accuracy: Option<f64>,
    pub per_class_accuracy: std::collections::BTreeMap<usize, f64>,
    pub accuracy_rows: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub review_identifications: Vec<SummaryIdentification>,
    pub runtime_seconds: f64,
}

#[derive(Serialize)]
pub struct SummaryRow {
    pub kind: String,
    pub index: usize,
    pub classes_seen: Vec<usize>,
    pub overall_accuracy: f64,
}

#[derive(Serialize)]
pub struct SummaryIdentification {
    pub reviewed_class: usize,
    pub matched_class: usize,
    pub affinity: f64,
}

pub fn summary_rows(checkpoints: &[AccuracyCheckpoint]) -> Vec<SummaryRow> {
    checkpoints
        .iter()
        .map(|cp| {
            let (kind, index) = match cp.label {
                CheckpointLabel::Task(i) => ("task".to_string(), i),
                CheckpointLabel::ReviewCycle(i) => ("review".to_string(), i),
            };
            SummaryRow {
                kind,
                index,
                classes_seen: cp.classes_seen.clone(),
                overall_accuracy: cp.outcome.overall_accuracy,
            }
        })
        .collect()
}

pub fn summary_identifications(ids: &[ReviewIdentification]) -> Vec<SummaryIdentification> {
    ids.iter()
        .map(|id| SummaryIdentification {
            reviewed_class: id.reviewed_class,
            matched_class: id.matched_class,
            affinity: id.affinity,
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::runtime(format!("summary serialization failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Square matrix as a CSV grid with row/column labels.
pub fn write_matrix_csv(path: &Path, labels: &[String], m: &Matrix) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "label")?;
    for l in labels {
        write!(out, ",{l}")?;
    }
    writeln!(out)?;
    for i in 0..m.rows() {
        write!(out, "{}", labels.get(i).map(String::as_str).unwrap_or(""))?;
        for j in 0..m.cols() {
            write!(out, ",{}", m.get(i, j))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Correlation stats sidecar.
pub fn write_correlation_summary(
    path: &Path,
    summary: &CorrelationSummary,
) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "within_class_mean,cross_class_mean")?;
    writeln!(
        out,
        "{},{}",
        summary.within_class_mean, summary.cross_class_mean
    )?;
    out.flush()?;
    Ok(())
}

/// Run directory layout helper.
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
