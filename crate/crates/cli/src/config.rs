//! Run configuration: a flat `key = value` text format with `[sections]`,
//! profile defaults, command-line overrides, and a canonical dump that is
//! written into every output directory and checkpoint for provenance.
//!
//! Parsing then dumping a canonical dump reproduces it byte for byte, which
//! is what makes checkpoint round-trips exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ildr_core::dataio::{
    load_cifar, load_idx, split_tasks_ordered, synth_subspace_data, CifarVariant, LabeledImages,
    TaskStream,
};
use ildr_core::network::{
    conv_decoder_specs, conv_encoder_specs, dense_decoder_specs_bn, dense_encoder_specs_bn,
    init_params, NetworkParams, Shape,
};
use ildr_core::{AdamHyper, CoreError, DimRule, RateConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// fast CPU profile: dense networks, short schedules
    Desk,
    /// the paper-scale profile: convolutional networks, 120 epochs per task
    Fidelity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Dense,
    Conv,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // [run]
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub splits: usize,
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_per_class: Option<usize>,
    pub eval_per_class: Option<usize>,
    pub class_order_seed: Option<u64>,
    /// restrict the dataset to these class ids (empty = all)
    pub keep_classes: Vec<usize>,
    // [network]
    pub arch: ArchKind,
    pub nz: usize,
    pub nc: usize,
    pub hidden: Vec<usize>,
    pub dense_batchnorm: bool,
    // [train]
    pub epochs_per_task: usize,
    pub review_epochs: Option<usize>,
    pub batch_size: usize,
    pub replay_per_class: Option<usize>,
    pub decoder_steps: usize,
    // [rate]
    pub epsilon_sq: f64,
    pub normalize_features: bool,
    // [loss]
    pub lambda: f64,
    pub gamma: f64,
    // [adam]
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    // [memory]
    pub proto_m: usize,
    pub proto_r: usize,
    pub dim_rule: DimRule,
    // [synthetic]
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_sub_dim: usize,
    pub synth_per_class: usize,
    pub synth_eval_per_class: usize,
    pub synth_noise_std: f64,
}

impl RunConfig {
    /// Defaults for a profile. Shared values mirror the reference training
    /// setup (ε²=1.0, λ=10, γ=1, lr=1e-4, β₁=0.5, m=20, r=12, nz=128).
    pub fn defaults(profile: Profile) -> Self {
        let (arch, epochs) = match profile {
            Profile::Desk => (ArchKind::Dense, 30),
            Profile::Fidelity => (ArchKind::Conv, 120),
        };
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            splits: 5,
            profile,
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            train_per_class: None,
            eval_per_class: None,
            class_order_seed: None,
            keep_classes: Vec::new(),
            arch,
            nz: 128,
            nc: 1,
            hidden: vec![256],
            dense_batchnorm: true,
            epochs_per_task: epochs,
            review_epochs: None,
            batch_size: 64,
            replay_per_class: None,
            decoder_steps: 1,
            epsilon_sq: 1.0,
            normalize_features: true,
            lambda: 10.0,
            gamma: 1.0,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            proto_m: 20,
            proto_r: 12,
            dim_rule: DimRule::Energy(0.95),
            synth_classes: 4,
            synth_dim: 16,
            synth_sub_dim: 2,
            synth_per_class: 500,
            synth_eval_per_class: 100,
            synth_noise_std: 0.05,
        }
    }

    /// Parse config text and apply `overrides` ("section.key=value") on top.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        // the profile decides the defaults, so resolve it first
        let mut profile = Profile::Desk;
        for (key, value) in &pairs {
            if key == "run.profile" {
                profile = match value.as_str() {
                    "desk" => Profile::Desk,
                    "fidelity" => Profile::Fidelity,
                    other => {
                        return Err(CliError::user(format!("unknown profile '{other}'")));
                    }
                };
            }
        }
        let mut cfg = Self::defaults(profile);
        for (key, value) in &pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |what: &str| CliError::user(format!("bad value '{value}' for {what}"));
        match key {
            "run.dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    "cifar100" => DatasetKind::Cifar100,
                    "synthetic" => DatasetKind::Synthetic,
                    _ => return Err(bad(key)),
                }
            }
            "run.data_dir" => self.data_dir = PathBuf::from(value),
            "run.splits" => self.splits = value.parse().map_err(|_| bad(key))?,
            "run.profile" => {} // consumed in from_text
            "run.seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "run.train_per_class" => self.train_per_class = parse_opt(value, key)?,
            "run.eval_per_class" => self.eval_per_class = parse_opt(value, key)?,
            "run.class_order_seed" => self.class_order_seed = parse_opt(value, key)?,
            "run.keep_classes" => {
                if value.is_empty() {
                    self.keep_classes = Vec::new();
                } else {
                    self.keep_classes = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad(key)))
                        .collect::<Result<_, _>>()?;
                }
            }
            "network.arch" => {
                self.arch = match value {
                    "dense" => ArchKind::Dense,
                    "conv" => ArchKind::Conv,
                    _ => return Err(bad(key)),
                }
            }
            "network.nz" => self.nz = value.parse().map_err(|_| bad(key))?,
            "network.nc" => self.nc = value.parse().map_err(|_| bad(key))?,
            "network.batchnorm" => {
                self.dense_batchnorm = value.parse().map_err(|_| bad(key))?
            }
            "network.hidden" => {
                if value.is_empty() {
                    self.hidden = Vec::new();
                } else {
                    self.hidden = value
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad(key)))
                        .collect::<Result<_, _>>()?;
                }
            }
            "train.epochs_per_task" => self.epochs_per_task = value.parse().map_err(|_| bad(key))?,
            "train.review_epochs" => self.review_epochs = parse_opt(value, key)?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "train.replay_per_class" => self.replay_per_class = parse_opt(value, key)?,
            "train.decoder_steps" => self.decoder_steps = value.parse().map_err(|_| bad(key))?,
            "rate.epsilon_sq" => self.epsilon_sq = value.parse().map_err(|_| bad(key))?,
            "rate.normalize_features" => {
                self.normalize_features = value.parse().map_err(|_| bad(key))?
            }
            "loss.lambda" => self.lambda = value.parse().map_err(|_| bad(key))?,
            "loss.gamma" => self.gamma = value.parse().map_err(|_| bad(key))?,
            "adam.learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "adam.beta1" => self.beta1 = value.parse().map_err(|_| bad(key))?,
            "adam.beta2" => self.beta2 = value.parse().map_err(|_| bad(key))?,
            "adam.epsilon" => self.epsilon = value.parse().map_err(|_| bad(key))?,
            "memory.m" => self.proto_m = value.parse().map_err(|_| bad(key))?,
            "memory.r" => self.proto_r = value.parse().map_err(|_| bad(key))?,
            "memory.dim_rule" => {
                self.dim_rule = if let Some(tau) = value.strip_prefix("energy:") {
                    DimRule::Energy(tau.parse().map_err(|_| bad(key))?)
                } else if let Some(r) = value.strip_prefix("fixed:") {
                    DimRule::Fixed(r.parse().map_err(|_| bad(key))?)
                } else {
                    return Err(bad(key));
                }
            }
            "synthetic.classes" => self.synth_classes = value.parse().map_err(|_| bad(key))?,
            "synthetic.dim" => self.synth_dim = value.parse().map_err(|_| bad(key))?,
            "synthetic.sub_dim" => self.synth_sub_dim = value.parse().map_err(|_| bad(key))?,
            "synthetic.per_class" => self.synth_per_class = value.parse().map_err(|_| bad(key))?,
            "synthetic.eval_per_class" => {
                self.synth_eval_per_class = value.parse().map_err(|_| bad(key))?
            }
            "synthetic.noise_std" => self.synth_noise_std = value.parse().map_err(|_| bad(key))?,
            other => return Err(CliError::user(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.splits == 0 {
            return Err(CliError::user("run.splits must be positive"));
        }
        if self.nz == 0 || self.batch_size == 0 || self.epochs_per_task == 0 {
            return Err(CliError::user(
                "network.nz, train.batch_size and train.epochs_per_task must be positive",
            ));
        }
        if self.arch == ArchKind::Conv && !(self.nc == 1 || self.nc == 3) {
            return Err(CliError::user("network.nc must be 1 or 3 for conv"));
        }
        self.train_config().validate().map_err(CliError::from)
    }

    /// Canonical dump: every key in fixed order. `parse(dump(x)) == x` and
    /// `dump(parse(t)) == t` for canonical `t`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let dataset = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        };
        let profile = match self.profile {
            Profile::Desk => "desk",
            Profile::Fidelity => "fidelity",
        };
        let arch = match self.arch {
            ArchKind::Dense => "dense",
            ArchKind::Conv => "conv",
        };
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "dataset = {dataset}");
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "splits = {}", self.splits);
        let _ = writeln!(s, "profile = {profile}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "train_per_class = {}", dump_opt(self.train_per_class));
        let _ = writeln!(s, "eval_per_class = {}", dump_opt(self.eval_per_class));
        let _ = writeln!(s, "class_order_seed = {}", dump_opt(self.class_order_seed));
        let keep: Vec<String> = self.keep_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "keep_classes = {}", keep.join(","));
        let _ = writeln!(s, "[network]");
        let _ = writeln!(s, "arch = {arch}");
        let _ = writeln!(s, "nz = {}", self.nz);
        let _ = writeln!(s, "nc = {}", self.nc);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "hidden = {}", hidden.join(","));
        let _ = writeln!(s, "batchnorm = {}", self.dense_batchnorm);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "epochs_per_task = {}", self.epochs_per_task);
        let _ = writeln!(s, "review_epochs = {}", dump_opt(self.review_epochs));
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "replay_per_class = {}", dump_opt(self.replay_per_class));
        let _ = writeln!(s, "decoder_steps = {}", self.decoder_steps);
        let _ = writeln!(s, "[rate]");
        let _ = writeln!(s, "epsilon_sq = {}", self.epsilon_sq);
        let _ = writeln!(s, "normalize_features = {}", self.normalize_features);
        let _ = writeln!(s, "[loss]");
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "[adam]");
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "[memory]");
        let _ = writeln!(s, "m = {}", self.proto_m);
        let _ = writeln!(s, "r = {}", self.proto_r);
        let dim_rule = match self.dim_rule {
            DimRule::Energy(tau) => format!("energy:{tau}"),
            DimRule::Fixed(r) => format!("fixed:{r}"),
        };
        let _ = writeln!(s, "dim_rule = {dim_rule}");
        let _ = writeln!(s, "[synthetic]");
        let _ = writeln!(s, "classes = {}", self.synth_classes);
        let _ = writeln!(s, "dim = {}", self.synth_dim);
        let _ = writeln!(s, "sub_dim = {}", self.synth_sub_dim);
        let _ = writeln!(s, "per_class = {}", self.synth_per_class);
        let _ = writeln!(s, "eval_per_class = {}", self.synth_eval_per_class);
        let _ = writeln!(s, "noise_std = {}", self.synth_noise_std);
        s
    }

    /// Flattened key→value map (for summary.json provenance).
    pub fn as_pairs(&self) -> BTreeMap<String, String> {
        parse_pairs(&self.dump())
            .expect("canonical dump must parse")
            .into_iter()
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_per_task: self.epochs_per_task,
            review_epochs: self.review_epochs.unwrap_or(self.epochs_per_task),
            batch_size: self.batch_size,
            seed: self.seed,
            rate: RateConfig {
                epsilon_sq: self.epsilon_sq,
                normalize_features: self.normalize_features,
            },
            weights: ildr_core::LossWeights {
                lambda: self.lambda,
                gamma: self.gamma,
            },
            adam: AdamHyper {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            proto_m: self.proto_m,
            proto_r: self.proto_r,
            dim_rule: self.dim_rule,
            replay_per_class: self.replay_per_class,
            decoder_steps: self.decoder_steps,
        }
    }

    fn input_shape(&self) -> Shape {
        match self.dataset {
            DatasetKind::Mnist => Shape::Image {
                channels: 1,
                height: 32,
                width: 32,
            },
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => Shape::Image {
                channels: 3,
                height: 32,
                width: 32,
            },
            DatasetKind::Synthetic => Shape::Flat(self.synth_dim),
        }
    }

    /// Build freshly initialized encoder/decoder networks for this config.
    pub fn build_networks(&self) -> Result<(NetworkParams, NetworkParams), CoreError> {
        let input_shape = self.input_shape();
        let enc_seed = self.seed.wrapping_mul(2).wrapping_add(1);
        let dec_seed = self.seed.wrapping_mul(2).wrapping_add(2);
        match self.arch {
            ArchKind::Conv => {
                let channels = match input_shape {
                    Shape::Image { channels, .. } => channels,
                    Shape::Flat(_) => {
                        return Err(CoreError::Config(
                            "conv architecture needs image input".into(),
                        ))
                    }
                };
                let enc = init_params(
                    &conv_encoder_specs(channels, self.nz),
                    input_shape.clone(),
                    enc_seed,
                )?;
                let dec = init_params(
                    &conv_decoder_specs(self.nz, channels),
                    Shape::Flat(self.nz),
                    dec_seed,
                )?;
                Ok((enc, dec))
            }
            ArchKind::Dense => {
                let input_len = input_shape.len();
                let enc = init_params(
                    &dense_encoder_specs_bn(input_len, &self.hidden, self.nz, self.dense_batchnorm),
                    Shape::Flat(input_len),
                    enc_seed,
                )?;
                let mut mirrored = self.hidden.clone();
                mirrored.reverse();
                let mut dec = init_params(
                    &dense_decoder_specs_bn(self.nz, &mirrored, input_len, self.dense_batchnorm),
                    Shape::Flat(self.nz),
                    dec_seed,
                )?;
                if std::env::var("ILDR_TIE_INIT").is_ok() && self.hidden.is_empty() {
                    use ildr_core::network::LayerParams;
                    let enc_w = match &enc.layers()[0] {
                        LayerParams::Dense { weight, .. } => weight.clone(),
                        _ => unreachable!(),
                    };
                    if let LayerParams::Dense { weight, .. } = &mut dec.layers_mut()[0] {
                        *weight = enc_w.transpose();
                    }
                }
                Ok((enc, dec))
            }
        }
    }

    fn find_data_file(&self, names: &[&str]) -> Result<PathBuf, CliError> {
        for name in names {
            let path = self.data_dir.join(name);
            if path.exists() {
                return Ok(path);
            }
        }
        Err(CliError::user(format!(
            "dataset file not found under {} (tried {})",
            self.data_dir.display(),
            names.join(", ")
        )))
    }

    /// Load the train and eval splits for the configured dataset.
    pub fn load_dataset(&self) -> Result<(LabeledImages, LabeledImages), CliError> {
        let (mut train, mut eval) = match self.dataset {
            DatasetKind::Mnist => {
                let train = load_idx(
                    &self.find_data_file(&[
                        "train-images-idx3-ubyte",
                        "train-images-idx3-ubyte.gz",
                        "train-images.idx3-ubyte",
                    ])?,
                    &self.find_data_file(&[
                        "train-labels-idx1-ubyte",
                        "train-labels-idx1-ubyte.gz",
                        "train-labels.idx1-ubyte",
                    ])?,
                )?;
                let eval = load_idx(
                    &self.find_data_file(&[
                        "t10k-images-idx3-ubyte",
                        "t10k-images-idx3-ubyte.gz",
                        "t10k-images.idx3-ubyte",
                    ])?,
                    &self.find_data_file(&[
                        "t10k-labels-idx1-ubyte",
                        "t10k-labels-idx1-ubyte.gz",
                        "t10k-labels.idx1-ubyte",
                    ])?,
                )?;
                (train, eval)
            }
            DatasetKind::Cifar10 => {
                let mut train: Option<LabeledImages> = None;
                for batch in 1..=5 {
                    let path =
                        self.find_data_file(&[&format!("data_batch_{batch}.bin")])?;
                    let part = load_cifar(&path, CifarVariant::Cifar10)?;
                    train = Some(match train {
                        None => part,
                        Some(mut acc) => {
                            acc.data = acc.data.hstack(&part.data);
                            acc.labels.extend(part.labels);
                            acc
                        }
                    });
                }
                let eval = load_cifar(
                    &self.find_data_file(&["test_batch.bin"])?,
                    CifarVariant::Cifar10,
                )?;
                (train.unwrap(), eval)
            }
            DatasetKind::Cifar100 => {
                let train = load_cifar(
                    &self.find_data_file(&["train.bin"])?,
                    CifarVariant::Cifar100,
                )?;
                let eval = load_cifar(
                    &self.find_data_file(&["test.bin"])?,
                    CifarVariant::Cifar100,
                )?;
                (train, eval)
            }
            DatasetKind::Synthetic => {
                // one draw covers train and eval so both live on the same
                // class subspaces
                let total = self.synth_per_class + self.synth_eval_per_class;
                let all = synth_subspace_data(
                    self.synth_classes,
                    self.synth_dim,
                    self.synth_sub_dim,
                    total,
                    self.synth_noise_std,
                    self.seed.wrapping_add(0x53_59_4e_54),
                )?;
                split_synthetic(all, self.synth_per_class, self.synth_eval_per_class)
            }
        };
        if !self.keep_classes.is_empty() {
            train = train.filter_classes(&self.keep_classes);
            eval = eval.filter_classes(&self.keep_classes);
        }
        if let Some(limit) = self.train_per_class {
            train = train.take_per_class(limit);
        }
        if let Some(limit) = self.eval_per_class {
            eval = eval.take_per_class(limit);
        }
        Ok((train, eval))
    }

    pub fn build_task_stream(&self, train: &LabeledImages) -> Result<TaskStream, CliError> {
        Ok(split_tasks_ordered(train, self.splits, self.class_order_seed)?)
    }
}

fn split_synthetic(
    all: LabeledImages,
    train_per_class: usize,
    _eval_per_class: usize,
) -> (LabeledImages, LabeledImages) {
    let mut train_cols = Vec::new();
    let mut eval_cols = Vec::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &label) in all.labels.iter().enumerate() {
        let c = seen.entry(label).or_insert(0);
        if *c < train_per_class {
            train_cols.push(i);
        } else {
            eval_cols.push(i);
        }
        *c += 1;
    }
    let pick = |cols: &[usize]| LabeledImages {
        data: all.data.select_columns(cols),
        labels: cols.iter().map(|&i| all.labels[i]).collect(),
        shape: all.shape.clone(),
    };
    (pick(&train_cols), pick(&eval_cols))
}

fn parse_opt<T: std::str::FromStr>(value: &str, key: &str) -> Result<Option<T>, CliError> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        value
            .parse()
            .map(Some)
            .map_err(|_| CliError::user(format!("bad value '{value}' for {key}")))
    }
}

fn dump_opt<T: std::fmt::Display>(value: Option<T>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

/// Parse `[section]` / `key = value` lines into "section.key" pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut section = String::new();
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::user(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        if section.is_empty() {
            return Err(CliError::user(format!(
                "config line {}: key '{key}' outside any [section]",
                lineno + 1
            )));
        }
        pairs.push((format!("{section}.{key}"), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Parse a `--set section.key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), CliError> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::user(format!("--set expects section.key=value, got '{arg}'")))
}
