//! Subcommand drivers. Each command validates its inputs and loads data
//! before creating any output, so a failing run leaves no partial output
//! directory behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ildr_core::dataio::{write_pgm, write_ppm, tile_grid, LabeledImages, TaskStream};
use ildr_core::evalkit::{affinity, correlation_matrix};
use ildr_core::gradcheck::run_all_suites;
use ildr_core::linalg::Matrix;
use ildr_core::network::{forward_eval, NetworkParams, Shape};
use ildr_core::rate::ClassPartition;
use ildr_core::trainer::{
    advance_incremental, encode_features, run_review, RunState, StepObserver,
};
use ildr_core::Task;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::outputs::{
    summary_identifications, summary_rows, write_accuracy_csv, write_correlation_summary,
    write_matrix_csv, write_summary, MetricsCsv, OutDir, Summary, ACCURACY_SCHEMA, METRICS_SCHEMA,
};
use crate::CliError;

fn build_summary(
    config: &RunConfig,
    run: &RunState,
    identifications: &[ildr_core::trainer::ReviewIdentification],
    runtime_seconds: f64,
) -> Summary {
    Summary {
        schema: 1,
        metrics_csv_schema: METRICS_SCHEMA,
        accuracy_csv_schema: ACCURACY_SCHEMA,
        seed: config.seed,
        config: config.as_pairs(),
        steps: run.steps,
        tasks_done: run.tasks_done,
        review_cycles_done: run.review_cycles_done,
        per_task_accuracy: run.metrics.per_task.clone(),
        last_accuracy: run.metrics.last_accuracy(),
        average_incremental_accuracy: run.metrics.average_incremental_accuracy(),
        per_class_accuracy: run.metrics.per_class.clone(),
        accuracy_rows: summary_rows(&run.checkpoints),
        review_identifications: summary_identifications(identifications),
        runtime_seconds,
    }
}

fn write_run_outputs(
    out: &OutDir,
    config: &RunConfig,
    config_text: &str,
    enc: &NetworkParams,
    dec: &NetworkParams,
    run: &RunState,
    identifications: &[ildr_core::trainer::ReviewIdentification],
    started: Instant,
) -> Result<(), CliError> {
    write_accuracy_csv(&out.file("accuracy.csv"), &run.checkpoints)?;
    let summary = build_summary(config, run, identifications, started.elapsed().as_secs_f64());
    write_summary(&out.file("summary.json"), &summary)?;
    checkpoint::save(&out.file("checkpoint.ckpt"), config_text, enc, dec, run)?;
    Ok(())
}

/// `train-joint` and `train-incremental`. Joint training is the degenerate
/// stream with a single task holding every class.
pub fn cmd_train(config: RunConfig, joint: bool) -> Result<(), CliError> {
    config.validate()?;
    let started = Instant::now();
    let (train, eval) = config.load_dataset()?;
    let stream = if joint {
        let classes = train
            .class_ids()
            .into_iter()
            .map(|id| (id, train.class_block(id)))
            .collect();
        TaskStream {
            tasks: vec![Task { classes }],
        }
    } else {
        config.build_task_stream(&train)?
    };

    let (mut enc, mut dec) = config.build_networks()?;
    let cfg = config.train_config();
    let config_text = config.dump();

    let out = OutDir::create(&config.out_dir)?;
    std::fs::write(out.file("config.txt"), &config_text)?;
    let mut metrics = MetricsCsv::create(&out.file("metrics.csv"))?;

    let mut run = RunState::fresh(&enc, &dec, &cfg);
    let result = drive_tasks(
        &mut enc, &mut dec, &mut run, &stream, &eval, &config, &cfg, &mut metrics, &out,
        &config_text,
    );
    metrics.flush()?;
    result?;
    write_run_outputs(&out, &config, &config_text, &enc, &dec, &run, &[], started)?;
    print_accuracy(&run);
    Ok(())
}

/// Resume an interrupted incremental run from its latest checkpoint.
pub fn cmd_train_resume(
    checkpoint_path: &Path,
    out_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let Checkpoint {
        mut config,
        config_text,
        mut encoder,
        mut decoder,
        mut run,
    } = checkpoint::load(checkpoint_path)?;
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    let (train, eval) = config.load_dataset()?;
    let stream = config.build_task_stream(&train)?;
    let cfg = config.train_config();

    let out = OutDir::create(&config.out_dir)?;
    std::fs::write(out.file("config.txt"), &config_text)?;
    let mut metrics = MetricsCsv::create(&out.file("metrics.csv"))?;
    let result = drive_tasks(
        &mut encoder,
        &mut decoder,
        &mut run,
        &stream,
        &eval,
        &config,
        &cfg,
        &mut metrics,
        &out,
        &config_text,
    );
    metrics.flush()?;
    result?;
    write_run_outputs(
        &out,
        &config,
        &config_text,
        &encoder,
        &decoder,
        &run,
        &[],
        started,
    )?;
    print_accuracy(&run);
    Ok(())
}

/// Advance task by task so that a checkpoint lands after every task; a
/// divergence abort therefore preserves the last completed-task checkpoint.
#[allow(clippy::too_many_arguments)]
fn drive_tasks(
    enc: &mut NetworkParams,
    dec: &mut NetworkParams,
    run: &mut RunState,
    stream: &TaskStream,
    eval: &LabeledImages,
    config: &RunConfig,
    cfg: &ildr_core::TrainConfig,
    metrics: &mut MetricsCsv,
    out: &OutDir,
    config_text: &str,
) -> Result<(), CliError> {
    let total = stream.tasks.len();
    while run.tasks_done < total {
        let upto = run.tasks_done + 1;
        let prefix = TaskStream {
            tasks: stream.tasks[..upto].to_vec(),
        };
        advance_incremental(enc, dec, run, &prefix, Some(eval), cfg, metrics)?;
        metrics.flush()?;
        checkpoint::save(
            &out.file(&format!("checkpoint_task{}.ckpt", run.tasks_done - 1)),
            config_text,
            enc,
            dec,
            run,
        )?;
        let _ = config;
    }
    Ok(())
}

fn print_accuracy(run: &RunState) {
    for cp in &run.checkpoints {
        let label = match cp.label {
            ildr_core::trainer::CheckpointLabel::Task(i) => format!("task {i}"),
            ildr_core::trainer::CheckpointLabel::ReviewCycle(i) => format!("review {i}"),
        };
        println!(
            "{label}: {} classes, accuracy {:.4}",
            cp.classes_seen.len(),
            cp.outcome.overall_accuracy
        );
    }
    if let (Some(last), Some(avg)) = (
        run.metrics.last_accuracy(),
        run.metrics.average_incremental_accuracy(),
    ) {
        println!("last accuracy {last:.4}, average incremental accuracy {avg:.4}");
    }
}

/// `review --checkpoint ... --cycles N`
pub fn cmd_review(
    checkpoint_path: &Path,
    cycles: usize,
    out_dir: Option<PathBuf>,
    overrides: &[(String, String)],
) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = checkpoint::load(checkpoint_path)?;
    let mut config = if overrides.is_empty() {
        loaded.config
    } else {
        RunConfig::from_text(&loaded.config_text, overrides)?
    };
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    let mut encoder = loaded.encoder;
    let mut decoder = loaded.decoder;
    let mut run = loaded.run;

    let (train, eval) = config.load_dataset()?;
    let cfg = config.train_config();
    let class_data: Vec<(usize, Matrix)> = run
        .store
        .class_ids()
        .into_iter()
        .map(|id| (id, train.class_block(id)))
        .collect();
    if class_data.iter().any(|(_, block)| block.cols() == 0) {
        return Err(CliError::user(
            "review: training data misses a stored class",
        ));
    }

    let config_text = config.dump();
    let out = OutDir::create(&config.out_dir)?;
    std::fs::write(out.file("config.txt"), &config_text)?;
    let mut metrics = MetricsCsv::create(&out.file("metrics.csv"))?;
    let identifications = run_review(
        &mut encoder,
        &mut decoder,
        &mut run,
        &class_data,
        cycles,
        Some(&eval),
        &cfg,
        &mut metrics,
    )?;
    metrics.flush()?;
    write_run_outputs(
        &out,
        &config,
        &config_text,
        &encoder,
        &decoder,
        &run,
        &identifications,
        started,
    )?;
    print_accuracy(&run);
    for id in &identifications {
        println!(
            "reviewed class {} matched stored class {} (affinity {:.4})",
            id.reviewed_class, id.matched_class, id.affinity
        );
    }
    Ok(())
}

/// `eval --checkpoint ...`: accuracy per class, subspace affinity matrix,
/// and the class-ordered feature correlation matrix.
pub fn cmd_eval(checkpoint_path: &Path, out_dir: Option<PathBuf>) -> Result<(), CliError> {
    let loaded = checkpoint::load(checkpoint_path)?;
    let mut config = loaded.config;
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    let (_, eval) = config.load_dataset()?;
    let cfg = config.train_config();
    let outcome =
        ildr_core::trainer::evaluate_checkpoint(&loaded.encoder, &loaded.run.store, &eval, &cfg.rate)?;

    let out = OutDir::create(&config.out_dir)?;
    std::fs::write(out.file("config.txt"), config.dump())?;

    // per-class accuracy
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(out.file("eval_per_class.csv"))?);
        writeln!(f, "class,correct,total,accuracy")?;
        for (id, counts) in &outcome.per_class {
            writeln!(
                f,
                "{},{},{},{}",
                id,
                counts.correct,
                counts.total,
                counts.accuracy()
            )?;
        }
        writeln!(f, "overall,,,{}", outcome.overall_accuracy)?;
    }

    // pairwise subspace affinity over stored models
    let models = loaded.run.store.models();
    let labels: Vec<String> = models.iter().map(|m| m.class_id.to_string()).collect();
    let mut aff = Matrix::zeros(models.len(), models.len());
    for i in 0..models.len() {
        for j in 0..models.len() {
            aff.set(i, j, affinity(&models[i].basis, &models[j].basis)?);
        }
    }
    write_matrix_csv(&out.file("affinity.csv"), &labels, &aff)?;

    // block structure of |ZᵀZ| on a per-class sample of eval features
    let seen = loaded.run.store.class_ids();
    let per_class_cap = 50usize;
    let mut blocks: Vec<Matrix> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for id in &seen {
        let block = eval.class_block(*id);
        let take = block.cols().min(per_class_cap);
        if take == 0 {
            continue;
        }
        blocks.push(block.columns(0, take));
        counts.push(take);
    }
    if !blocks.is_empty() {
        let mut all = blocks.remove(0);
        for b in blocks {
            all = all.hstack(&b);
        }
        let features = encode_features(&loaded.encoder, &all, &cfg.rate)?;
        let part = ClassPartition::from_block_sizes(&counts)?;
        let (corr, corr_summary) = correlation_matrix(&features, &part)?;
        let corr_labels: Vec<String> = (0..corr.rows()).map(|i| i.to_string()).collect();
        write_matrix_csv(&out.file("correlation.csv"), &corr_labels, &corr)?;
        write_correlation_summary(&out.file("correlation_summary.csv"), &corr_summary)?;
    }

    println!(
        "overall accuracy {:.4} over {} samples ({} with unknown labels)",
        outcome.overall_accuracy, outcome.total, outcome.unknown_label_errors
    );
    Ok(())
}

fn image_dims(shape: &Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => (*channels, *height, *width),
        Shape::Flat(n) => (1, 1, *n),
    }
}

fn write_image_grid(
    path: &Path,
    channels: usize,
    height: usize,
    width: usize,
    images: &[Vec<f64>],
    cols: usize,
) -> Result<(), CliError> {
    let rows = images.len().div_ceil(cols);
    if channels == 3 {
        // tile each channel plane separately
        let plane = height * width;
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let per: Vec<Vec<f64>> = images
                    .iter()
                    .map(|img| img[c * plane..(c + 1) * plane].to_vec())
                    .collect();
                tile_grid(&per, rows, cols, height, width)
            })
            .collect();
        let mut combined = Vec::with_capacity(3 * planes[0].len());
        for p in &planes {
            combined.extend_from_slice(p);
        }
        write_ppm(path, &combined, rows * height, cols * width)?;
    } else {
        let grid = tile_grid(images, rows, cols, height, width);
        write_pgm(path, &grid, rows * height, cols * width)?;
    }
    Ok(())
}

/// `replay-export --checkpoint ...`: auto-encoding grids g(f(X)) and, per
/// class, decoded prototypes nearest each of the top principal components.
pub fn cmd_replay_export(
    checkpoint_path: &Path,
    out_dir: Option<PathBuf>,
    samples: usize,
) -> Result<(), CliError> {
    let loaded = checkpoint::load(checkpoint_path)?;
    let mut config = loaded.config;
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    let (_, eval) = config.load_dataset()?;
    let cfg = config.train_config();
    let (channels, height, width) = image_dims(&eval.shape);
    let ext = if channels == 3 { "ppm" } else { "pgm" };

    let out = OutDir::create(&config.out_dir)?;
    std::fs::write(out.file("config.txt"), config.dump())?;

    // auto-encoding panel: originals and their transcriptions
    let take = samples.min(eval.len()).max(1);
    let originals = eval.data.columns(0, take);
    let z = encode_features(&loaded.encoder, &originals, &cfg.rate)?;
    let decoded = forward_eval(&loaded.decoder, &z)?;
    let cols = take.min(8);
    let to_vecs = |m: &Matrix| -> Vec<Vec<f64>> { (0..m.cols()).map(|j| m.col(j).to_vec()).collect() };
    write_image_grid(
        &out.file(&format!("originals.{ext}")),
        channels,
        height,
        width,
        &to_vecs(&originals),
        cols,
    )?;
    write_image_grid(
        &out.file(&format!("transcriptions.{ext}")),
        channels,
        height,
        width,
        &to_vecs(&decoded),
        cols,
    )?;

    // per class: prototypes nearest each of the top principal components
    for class in loaded.run.store.classes() {
        let model = &class.model;
        let directions = model.basis.cols().min(4);
        if directions == 0 || class.prototypes.cols() == 0 {
            continue;
        }
        let per_direction = 5usize.min(class.prototypes.cols());
        let mut picked: Vec<Vec<f64>> = Vec::new();
        for dir in 0..directions {
            let v = model.basis.col(dir);
            let mut scored: Vec<(usize, f64)> = (0..class.prototypes.cols())
                .map(|j| {
                    let col = class.prototypes.col(j);
                    let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                    (j, dot.abs())
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (j, _) in scored.into_iter().take(per_direction) {
                picked.push(class.prototypes.col(j).to_vec());
            }
        }
        let z = Matrix::from_columns(&picked);
        let decoded = forward_eval(&loaded.decoder, &z)?;
        write_image_grid(
            &out.file(&format!("class_{}_components.{ext}", class.class_id)),
            channels,
            height,
            width,
            &to_vecs(&decoded),
            per_direction,
        )?;
    }
    println!("replay panels written to {}", out.root.display());
    Ok(())
}

/// `gradcheck`: run every finite-difference suite and print a pass/fail table.
pub fn cmd_gradcheck(seeds: &[u64]) -> Result<(), CliError> {
    let seeds: Vec<u64> = if seeds.is_empty() {
        (0..5).collect()
    } else {
        seeds.to_vec()
    };
    let results = run_all_suites(&seeds)?;
    let mut all_pass = true;
    println!(
        "{:<36} {:>9} {:>12} {:>9} {:>6}",
        "suite", "instances", "max_rel_err", "tol", "status"
    );
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        all_pass &= r.passed();
        println!(
            "{:<36} {:>9} {:>12.3e} {:>9.0e} {:>6}",
            r.name, r.instances, r.max_rel_error, r.tolerance, status
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::runtime("gradient check failed"))
    }
}

/// Shared observer alias so integration tests can drive commands with their
/// own sinks.
pub type DynObserver<'a> = &'a mut dyn StepObserver;
