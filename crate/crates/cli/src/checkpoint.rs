//! Versioned binary checkpoints. A checkpoint is self-contained: config
//! text, both networks (specs and every tensor including batchnorm running
//! statistics), Adam states, the prototype store, the accuracy history, and
//! the RNG position. save→load→save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use ildr_core::evalkit::{ClassCounts, EvalOutcome};
use ildr_core::linalg::Matrix;
use ildr_core::memory::{ClassMemory, SubspaceModel};
use ildr_core::network::{AdamHyper, AdamState, LayerParams, LayerSpec, NetworkParams, Shape};
use ildr_core::network::init_params;
use ildr_core::trainer::{AccuracyCheckpoint, CheckpointLabel, RunState};
use ildr_core::{MetricsRecord, PrototypeStore, RngState};

use crate::config::RunConfig;
use crate::CliError;

const MAGIC: &[u8; 8] = b"ILDRCKPT";
const VERSION: u32 = 1;

/// Everything needed to continue or inspect a run.
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_text: String,
    pub encoder: NetworkParams,
    pub decoder: NetworkParams,
    pub run: RunState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for x in m.data() {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::user(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CliError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CliError> {
        Ok(self.u64()? as usize)
    }

    fn str(&mut self) -> Result<String, CliError> {
        let len = self.usize()?;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CliError::user("checkpoint contains invalid utf-8"))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>, CliError> {
        let len = self.usize()?;
        (0..len).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<Matrix, CliError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = (0..rows * cols)
            .map(|_| self.f64())
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

fn write_shape(w: &mut Writer, shape: &Shape) {
    match shape {
        Shape::Flat(n) => {
            w.u8(0);
            w.u64(*n as u64);
        }
        Shape::Image {
            channels,
            height,
            width,
        } => {
            w.u8(1);
            w.u64(*channels as u64);
            w.u64(*height as u64);
            w.u64(*width as u64);
        }
    }
}

fn read_shape(r: &mut Reader) -> Result<Shape, CliError> {
    match r.u8()? {
        0 => Ok(Shape::Flat(r.usize()?)),
        1 => Ok(Shape::Image {
            channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        }),
        tag => Err(CliError::user(format!("unknown shape tag {tag}"))),
    }
}

fn write_spec(w: &mut Writer, spec: &LayerSpec) {
    match spec {
        LayerSpec::Dense { input, output } => {
            w.u8(0);
            w.u64(*input as u64);
            w.u64(*output as u64);
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            w.u8(1);
            for v in [in_channels, out_channels, kernel, stride, pad] {
                w.u64(*v as u64);
            }
        }
        LayerSpec::Deconv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            w.u8(2);
            for v in [in_channels, out_channels, kernel, stride, pad] {
                w.u64(*v as u64);
            }
        }
        LayerSpec::BatchNorm => w.u8(3),
        LayerSpec::Relu => w.u8(4),
        LayerSpec::LeakyRelu { slope } => {
            w.u8(5);
            w.f64(*slope);
        }
        LayerSpec::Tanh => w.u8(6),
        LayerSpec::Flatten => w.u8(7),
        LayerSpec::Reshape {
            channels,
            height,
            width,
        } => {
            w.u8(8);
            w.u64(*channels as u64);
            w.u64(*height as u64);
            w.u64(*width as u64);
        }
    }
}

fn read_spec(r: &mut Reader) -> Result<LayerSpec, CliError> {
    Ok(match r.u8()? {
        0 => LayerSpec::Dense {
            input: r.usize()?,
            output: r.usize()?,
        },
        1 => LayerSpec::Conv {
            in_channels: r.usize()?,
            out_channels: r.usize()?,
            kernel: r.usize()?,
            stride: r.usize()?,
            pad: r.usize()?,
        },
        2 => LayerSpec::Deconv {
            in_channels: r.usize()?,
            out_channels: r.usize()?,
            kernel: r.usize()?,
            stride: r.usize()?,
            pad: r.usize()?,
        },
        3 => LayerSpec::BatchNorm,
        4 => LayerSpec::Relu,
        5 => LayerSpec::LeakyRelu { slope: r.f64()? },
        6 => LayerSpec::Tanh,
        7 => LayerSpec::Flatten,
        8 => LayerSpec::Reshape {
            channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        },
        tag => return Err(CliError::user(format!("unknown layer tag {tag}"))),
    })
}

fn write_network(w: &mut Writer, net: &NetworkParams) {
    write_shape(w, net.input_shape());
    w.u64(net.specs().len() as u64);
    for spec in net.specs() {
        write_spec(w, spec);
    }
    for layer in net.layers() {
        match layer {
            LayerParams::Dense { weight, bias }
            | LayerParams::Conv { weight, bias }
            | LayerParams::Deconv { weight, bias } => {
                w.matrix(weight);
                w.f64_slice(bias);
            }
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            } => {
                w.f64_slice(scale);
                w.f64_slice(shift);
                w.f64_slice(running_mean);
                w.f64_slice(running_var);
            }
            LayerParams::Stateless => {}
        }
    }
}

fn read_network(r: &mut Reader) -> Result<NetworkParams, CliError> {
    let input_shape = read_shape(r)?;
    let spec_count = r.usize()?;
    let specs = (0..spec_count)
        .map(|_| read_spec(r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut net = init_params(&specs, input_shape, 0)?;
    for layer in net.layers_mut() {
        match layer {
            LayerParams::Dense { weight, bias }
            | LayerParams::Conv { weight, bias }
            | LayerParams::Deconv { weight, bias } => {
                let m = r.matrix()?;
                if m.rows() != weight.rows() || m.cols() != weight.cols() {
                    return Err(CliError::user("checkpoint weight shape mismatch"));
                }
                *weight = m;
                let b = r.f64_vec()?;
                if b.len() != bias.len() {
                    return Err(CliError::user("checkpoint bias shape mismatch"));
                }
                *bias = b;
            }
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            } => {
                *scale = r.f64_vec()?;
                *shift = r.f64_vec()?;
                *running_mean = r.f64_vec()?;
                *running_var = r.f64_vec()?;
            }
            LayerParams::Stateless => {}
        }
    }
    Ok(net)
}

fn write_adam(w: &mut Writer, state: &AdamState) {
    w.f64(state.hyper.learning_rate);
    w.f64(state.hyper.beta1);
    w.f64(state.hyper.beta2);
    w.f64(state.hyper.epsilon);
    w.u64(state.step);
    w.u64(state.first_moment.len() as u64);
    for (m, v) in state.first_moment.iter().zip(state.second_moment.iter()) {
        w.f64_slice(m);
        w.f64_slice(v);
    }
}

fn read_adam(r: &mut Reader) -> Result<AdamState, CliError> {
    let hyper = AdamHyper {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let step = r.u64()?;
    let count = r.usize()?;
    let mut first = Vec::with_capacity(count);
    let mut second = Vec::with_capacity(count);
    for _ in 0..count {
        first.push(r.f64_vec()?);
        second.push(r.f64_vec()?);
    }
    Ok(AdamState {
        hyper,
        step,
        first_moment: first,
        second_moment: second,
    })
}

fn write_model(w: &mut Writer, model: &SubspaceModel) {
    w.u64(model.class_id as u64);
    w.f64_slice(&model.mean);
    w.matrix(&model.basis);
    w.u64(model.dim as u64);
    w.f64_slice(&model.spectrum);
}

fn read_model(r: &mut Reader) -> Result<SubspaceModel, CliError> {
    Ok(SubspaceModel {
        class_id: r.usize()?,
        mean: r.f64_vec()?,
        basis: r.matrix()?,
        dim: r.usize()?,
        spectrum: r.f64_vec()?,
    })
}

fn write_outcome(w: &mut Writer, outcome: &EvalOutcome) {
    w.f64(outcome.overall_accuracy);
    w.u64(outcome.unknown_label_errors as u64);
    w.u64(outcome.total as u64);
    w.u64(outcome.per_class.len() as u64);
    for (id, counts) in &outcome.per_class {
        w.u64(*id as u64);
        w.u64(counts.correct as u64);
        w.u64(counts.total as u64);
    }
}

fn read_outcome(r: &mut Reader) -> Result<EvalOutcome, CliError> {
    let overall_accuracy = r.f64()?;
    let unknown_label_errors = r.usize()?;
    let total = r.usize()?;
    let count = r.usize()?;
    let mut per_class = BTreeMap::new();
    for _ in 0..count {
        let id = r.usize()?;
        let correct = r.usize()?;
        let class_total = r.usize()?;
        per_class.insert(
            id,
            ClassCounts {
                correct,
                total: class_total,
            },
        );
    }
    Ok(EvalOutcome {
        overall_accuracy,
        per_class,
        unknown_label_errors,
        total,
    })
}

/// Serialize a checkpoint to bytes.
pub fn encode(
    config_text: &str,
    encoder: &NetworkParams,
    decoder: &NetworkParams,
    run: &RunState,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(config_text);
    w.u64(run.tasks_done as u64);
    w.u64(run.review_cycles_done as u64);
    w.u64(run.steps);
    w.buf.extend_from_slice(&run.rng_state.seed);
    w.u128(run.rng_state.word_pos);
    write_network(&mut w, encoder);
    write_network(&mut w, decoder);
    write_adam(&mut w, &run.adam_enc);
    write_adam(&mut w, &run.adam_dec);

    w.u64(run.store.proto_m as u64);
    w.u64(run.store.proto_r as u64);
    w.u64(run.store.len() as u64);
    for class in run.store.classes() {
        w.u64(class.class_id as u64);
        w.matrix(&class.prototypes);
        write_model(&mut w, &class.model);
    }

    w.u64(run.checkpoints.len() as u64);
    for cp in &run.checkpoints {
        match cp.label {
            CheckpointLabel::Task(i) => {
                w.u8(0);
                w.u64(i as u64);
            }
            CheckpointLabel::ReviewCycle(i) => {
                w.u8(1);
                w.u64(i as u64);
            }
        }
        w.u64(cp.classes_seen.len() as u64);
        for id in &cp.classes_seen {
            w.u64(*id as u64);
        }
        write_outcome(&mut w, &cp.outcome);
    }

    w.f64_slice(&run.metrics.per_task);
    w.u64(run.metrics.per_class.len() as u64);
    for (id, acc) in &run.metrics.per_class {
        w.u64(*id as u64);
        w.f64(*acc);
    }
    w.buf
}

/// Parse checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CliError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(CliError::user(format!(
            "not a checkpoint: bad magic {magic:02x?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::user(format!(
            "checkpoint version {version} not supported (expected {VERSION})"
        )));
    }
    let config_text = r.str()?;
    let config = RunConfig::from_text(&config_text, &[])?;
    let tasks_done = r.usize()?;
    let review_cycles_done = r.usize()?;
    let steps = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let encoder = read_network(&mut r)?;
    let decoder = read_network(&mut r)?;
    let adam_enc = read_adam(&mut r)?;
    let adam_dec = read_adam(&mut r)?;

    let proto_m = r.usize()?;
    let proto_r = r.usize()?;
    let class_count = r.usize()?;
    let mut store = PrototypeStore::new(proto_m, proto_r);
    for _ in 0..class_count {
        let class_id = r.usize()?;
        let prototypes = r.matrix()?;
        let model = read_model(&mut r)?;
        store
            .append(ClassMemory {
                class_id,
                prototypes,
                model,
            })
            .map_err(CliError::from)?;
    }

    let cp_count = r.usize()?;
    let mut checkpoints = Vec::with_capacity(cp_count);
    for _ in 0..cp_count {
        let label = match r.u8()? {
            0 => CheckpointLabel::Task(r.usize()?),
            1 => CheckpointLabel::ReviewCycle(r.usize()?),
            tag => return Err(CliError::user(format!("unknown checkpoint label {tag}"))),
        };
        let id_count = r.usize()?;
        let classes_seen = (0..id_count)
            .map(|_| r.usize())
            .collect::<Result<Vec<_>, _>>()?;
        let outcome = read_outcome(&mut r)?;
        checkpoints.push(AccuracyCheckpoint {
            label,
            classes_seen,
            outcome,
        });
    }

    let per_task = r.f64_vec()?;
    let pc_count = r.usize()?;
    let mut per_class = BTreeMap::new();
    for _ in 0..pc_count {
        let id = r.usize()?;
        per_class.insert(id, r.f64()?);
    }
    if r.pos != bytes.len() {
        return Err(CliError::user(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        config,
        config_text,
        encoder,
        decoder,
        run: RunState {
            store,
            adam_enc,
            adam_dec,
            metrics: MetricsRecord {
                per_task,
                per_class,
            },
            checkpoints,
            rng_state: RngState { seed, word_pos },
            steps,
            tasks_done,
            review_cycles_done,
        },
    })
}

pub fn save(
    path: &Path,
    config_text: &str,
    encoder: &NetworkParams,
    decoder: &NetworkParams,
    run: &RunState,
) -> Result<(), CliError> {
    std::fs::write(path, encode(config_text, encoder, decoder, run))
        .map_err(|e| CliError::user(format!("cannot write checkpoint {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::user(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
