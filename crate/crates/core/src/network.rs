//! Configurable encoder/decoder networks with explicit forward and backward
//! passes and Adam updates. No autodiff: every layer's backward is written
//! out and checked against finite differences.
//!
//! Batches are column-major matrices with one flattened sample per column.
//! Image samples use channel-major layout: entry `c*h*w + y*w + x`.
//!
//! `forward` never mutates the network. Train-mode batchnorm statistics are
//! returned in the cache and applied afterwards with [`commit_batchnorm`],
//! so a training step is a pure function of (parameters, pre-step statistics,
//! batch) — which is what makes the finite-difference checks and replay
//! determinism exact.

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use crate::rng::RunRng;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Shape of one sample flowing between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Flat(n) => *n,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Deconv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Flatten,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    pub fn leaky_relu() -> Self {
        LayerSpec::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Per-layer parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense {
        weight: Matrix, // output × input
        bias: Vec<f64>,
    },
    Conv {
        weight: Matrix, // out_channels × in_channels*k*k
        bias: Vec<f64>,
    },
    Deconv {
        weight: Matrix, // in_channels × out_channels*k*k
        bias: Vec<f64>,
    },
    BatchNorm {
        scale: Vec<f64>,
        shift: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Stateless,
}

/// A full network: layer specs, the shape at every seam, and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    specs: Vec<LayerSpec>,
    shapes: Vec<Shape>, // shapes.len() == specs.len() + 1
    layers: Vec<LayerParams>,
}

fn infer_shape(spec: &LayerSpec, input: &Shape) -> Result<Shape> {
    let err = |msg: String| Err(CoreError::config(msg));
    match spec {
        LayerSpec::Dense { input: din, output } => match input {
            Shape::Flat(n) if *n == *din => Ok(Shape::Flat(*output)),
            other => err(format!("dense expects Flat({din}), got {other:?}")),
        },
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => match input {
            Shape::Image {
                channels,
                height,
                width,
            } if *channels == *in_channels => {
                let oh = conv_out_extent(*height, *kernel, *stride, *pad)?;
                let ow = conv_out_extent(*width, *kernel, *stride, *pad)?;
                Ok(Shape::Image {
                    channels: *out_channels,
                    height: oh,
                    width: ow,
                })
            }
            other => err(format!("conv expects {in_channels}-channel image, got {other:?}")),
        },
        LayerSpec::Deconv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => match input {
            Shape::Image {
                channels,
                height,
                width,
            } if *channels == *in_channels => {
                let oh = deconv_out_extent(*height, *kernel, *stride, *pad)?;
                let ow = deconv_out_extent(*width, *kernel, *stride, *pad)?;
                Ok(Shape::Image {
                    channels: *out_channels,
                    height: oh,
                    width: ow,
                })
            }
            other => err(format!(
                "deconv expects {in_channels}-channel image, got {other:?}"
            )),
        },
        LayerSpec::BatchNorm
        | LayerSpec::Relu
        | LayerSpec::LeakyRelu { .. }
        | LayerSpec::Tanh => Ok(input.clone()),
        LayerSpec::Flatten => match input {
            Shape::Image { .. } => Ok(Shape::Flat(input.len())),
            other => err(format!("flatten expects an image shape, got {other:?}")),
        },
        LayerSpec::Reshape {
            channels,
            height,
            width,
        } => match input {
            Shape::Flat(n) if *n == channels * height * width => Ok(Shape::Image {
                channels: *channels,
                height: *height,
                width: *width,
            }),
            other => err(format!(
                "reshape to {channels}x{height}x{width} does not match {other:?}"
            )),
        },
    }
}

fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 || (padded - kernel) % stride != 0 {
        return Err(CoreError::config(format!(
            "conv geometry does not compose: extent {extent}, kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn deconv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (extent - 1) * stride + kernel;
    if extent == 0 || stride == 0 || grown < 2 * pad || grown - 2 * pad == 0 {
        return Err(CoreError::config(format!(
            "deconv geometry does not compose: extent {extent}, kernel {kernel}, stride {stride}, pad {pad}"
        )));
    }
    Ok(grown - 2 * pad)
}

/// BatchNorm channel grouping for a shape: (channels, spatial extent).
fn bn_layout(shape: &Shape) -> (usize, usize) {
    match shape {
        Shape::Flat(n) => (*n, 1),
        Shape::Image {
            channels,
            height,
            width,
        } => (*channels, height * width),
    }
}

/// Zero-mean scaled-uniform initialization: weights ~ U(−√3/√fan_in, √3/√fan_in)
/// so the entry standard deviation is exactly 1/√fan_in. Batchnorm starts at
/// scale 1, shift 0, running statistics (0, 1). Deterministic per seed.
pub fn init_params(specs: &[LayerSpec], input_shape: Shape, seed: u64) -> Result<NetworkParams> {
    if input_shape.is_empty() {
        return Err(CoreError::config("empty input shape"));
    }
    let mut rng = RunRng::seed_from_u64(seed);
    let mut shapes = vec![input_shape];
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let in_shape = shapes.last().unwrap().clone();
        let out_shape = infer_shape(spec, &in_shape)?;
        let params = match spec {
            LayerSpec::Dense { input, output } => LayerParams::Dense {
                weight: uniform_weights(&mut rng, *output, *input, *input),
                bias: uniform_bias(&mut rng, *output, *input),
            },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::Conv {
                weight: uniform_weights(
                    &mut rng,
                    *out_channels,
                    in_channels * kernel * kernel,
                    in_channels * kernel * kernel,
                ),
                bias: uniform_bias(&mut rng, *out_channels, in_channels * kernel * kernel),
            },
            LayerSpec::Deconv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::Deconv {
                weight: uniform_weights(
                    &mut rng,
                    *in_channels,
                    out_channels * kernel * kernel,
                    in_channels * kernel * kernel,
                ),
                bias: uniform_bias(&mut rng, *out_channels, in_channels * kernel * kernel),
            },
            LayerSpec::BatchNorm => {
                let (channels, _) = bn_layout(&in_shape);
                LayerParams::BatchNorm {
                    scale: vec![1.0; channels],
                    shift: vec![0.0; channels],
                    running_mean: vec![0.0; channels],
                    running_var: vec![1.0; channels],
                }
            }
            _ => LayerParams::Stateless,
        };
        layers.push(params);
        shapes.push(out_shape);
    }
    Ok(NetworkParams {
        specs: specs.to_vec(),
        shapes,
        layers,
    })
}

fn uniform_weights(rng: &mut RunRng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = (3.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

// nonzero bias init keeps units off exact zero, so no feature column can
// collapse to the origin where sphere normalization is undefined
fn uniform_bias(rng: &mut RunRng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.uniform_range(-bound, bound)).collect()
}

impl NetworkParams {
    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &Shape {
        self.shapes.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.output_shape().len()
    }

    /// Flat views of every trainable tensor, in a fixed order
    /// (weights/biases per layer; batchnorm scale then shift).
    pub fn trainable_tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Dense { weight, bias }
                | LayerParams::Conv { weight, bias }
                | LayerParams::Deconv { weight, bias } => {
                    out.push(weight.data());
                    out.push(bias.as_slice());
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push(scale.as_slice());
                    out.push(shift.as_slice());
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Dense { weight, bias }
                | LayerParams::Conv { weight, bias }
                | LayerParams::Deconv { weight, bias } => {
                    out.push(weight.data_mut());
                    out.push(bias.as_mut_slice());
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push(scale.as_mut_slice());
                    out.push(shift.as_mut_slice());
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients aligned with [`NetworkParams::trainable_tensors`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    tensors: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &NetworkParams) -> Self {
        Self {
            tensors: net
                .trainable_tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamGrads) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors.iter_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Adam hyperparameters. Defaults follow the training setup: lr 1e-4,
/// β₁ 0.5, β₂ 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &NetworkParams, hyper: AdamHyper) -> Self {
        let moments: Vec<Vec<f64>> = net
            .trainable_tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            hyper,
            step: 0,
            first_moment: moments.clone(),
            second_moment: moments,
        }
    }
}

/// One bias-corrected Adam descent step.
pub fn adam_step(net: &mut NetworkParams, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    let tensors = net.trainable_tensors_mut();
    if tensors.len() != grads.tensors.len() {
        return Err(CoreError::arg(format!(
            "adam_step: {} gradient tensors for {} parameter tensors",
            grads.tensors.len(),
            tensors.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for ((param, grad), (m, v)) in tensors
        .into_iter()
        .zip(grads.tensors.iter())
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        if param.len() != grad.len() {
            return Err(CoreError::arg("adam_step: tensor shape mismatch"));
        }
        for i in 0..param.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

/// Forward-pass mode. Train uses batch statistics in batchnorm; Eval uses
/// running statistics (and is a pure function of parameters and input).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum CacheEntry {
    Dense {
        input: Matrix,
    },
    Conv {
        input: Matrix,
    },
    Deconv {
        input: Matrix,
    },
    BatchNormTrain {
        normalized: Matrix,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Matrix,
    },
    LeakyRelu {
        input: Matrix,
    },
    Tanh {
        output: Matrix,
    },
    Passthrough,
}

/// Intermediates retained by [`forward`] for the matching [`backward`].
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    entries: Vec<CacheEntry>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Run the network on a batch. Returns the output and the activation cache.
pub fn forward(net: &NetworkParams, x: &Matrix, mode: Mode) -> Result<(Matrix, ForwardCache)> {
    if x.rows() != net.input_shape().len() {
        return Err(CoreError::config(format!(
            "input has {} rows, network expects {}",
            x.rows(),
            net.input_shape().len()
        )));
    }
    if x.cols() == 0 {
        return Err(CoreError::arg("forward: empty batch"));
    }
    let batch = x.cols();
    let mut entries = Vec::with_capacity(net.specs.len());
    let mut current = x.clone();
    for (idx, spec) in net.specs.iter().enumerate() {
        let (next, entry) = layer_forward(spec, &net.layers[idx], &net.shapes[idx], &net.shapes[idx + 1], &current, mode)?;
        entries.push(entry);
        current = next;
    }
    Ok((
        current,
        ForwardCache {
            mode,
            batch,
            entries,
        },
    ))
}

/// Eval-mode forward without keeping the cache.
pub fn forward_eval(net: &NetworkParams, x: &Matrix) -> Result<Matrix> {
    forward(net, x, Mode::Eval).map(|(out, _)| out)
}

/// Fold the train-mode batch statistics recorded in `cache` into the running
/// statistics: running = momentum*running + (1-momentum)*batch.
pub fn commit_batchnorm(net: &mut NetworkParams, cache: &ForwardCache) {
    if cache.mode != Mode::Train {
        return;
    }
    for (layer, entry) in net.layers.iter_mut().zip(cache.entries.iter()) {
        if let (
            LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            },
            CacheEntry::BatchNormTrain { mean, var, .. },
        ) = (layer, entry)
        {
            for (r, b) in running_mean.iter_mut().zip(mean.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in running_var.iter_mut().zip(var.iter()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    in_shape: &Shape,
    _out_shape: &Shape,
    x: &Matrix,
    mode: Mode,
) -> Result<(Matrix, CacheEntry)> {
    match (spec, params) {
        (LayerSpec::Dense { .. }, LayerParams::Dense { weight, bias }) => {
            let mut y = weight.matmul(x);
            for j in 0..y.cols() {
                for (v, b) in y.col_mut(j).iter_mut().zip(bias.iter()) {
                    *v += b;
                }
            }
            Ok((y, CacheEntry::Dense { input: x.clone() }))
        }
        (
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            },
            LayerParams::Conv { weight, bias },
        ) => {
            let geom = GeomView::for_conv(in_shape, *in_channels, *out_channels, *kernel, *stride, *pad)?;
            let mut y = Matrix::zeros(geom.out_c * geom.small_hw(), x.cols());
            for s in 0..x.cols() {
                let cols = geom.gather_patches(x.col(s));
                let y_mat = weight.matmul(&cols); // out_c × small_hw
                let ycol = y.col_mut(s);
                for c in 0..geom.out_c {
                    let base = c * geom.small_hw();
                    for o in 0..geom.small_hw() {
                        ycol[base + o] = y_mat.get(c, o) + bias[c];
                    }
                }
            }
            Ok((y, CacheEntry::Conv { input: x.clone() }))
        }
        (
            LayerSpec::Deconv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            },
            LayerParams::Deconv { weight, bias },
        ) => {
            let geom = GeomView::for_deconv(in_shape, *in_channels, *out_channels, *kernel, *stride, *pad)?;
            let mut y = Matrix::zeros(geom.out_c * geom.big_hw(), x.cols());
            for s in 0..x.cols() {
                // X as (in_c × ihw)
                let x_mat = channels_as_rows(x.col(s), geom.in_c, geom.small_hw());
                let cols = weight.matmul_transpose_self(&x_mat); // out_c*k*k × small_hw
                let ycol = y.col_mut(s);
                geom.scatter_patches(&cols, ycol);
                for c in 0..geom.out_c {
                    let base = c * geom.big_hw();
                    for v in &mut ycol[base..base + geom.big_hw()] {
                        *v += bias[c];
                    }
                }
            }
            Ok((y, CacheEntry::Deconv { input: x.clone() }))
        }
        (
            LayerSpec::BatchNorm,
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            },
        ) => {
            let (channels, spatial) = bn_layout(in_shape);
            match mode {
                Mode::Train => {
                    let count = (x.cols() * spatial) as f64;
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for j in 0..x.cols() {
                        let col = x.col(j);
                        for c in 0..channels {
                            for v in &col[c * spatial..(c + 1) * spatial] {
                                mean[c] += v;
                            }
                        }
                    }
                    for m in mean.iter_mut() {
                        *m /= count;
                    }
                    for j in 0..x.cols() {
                        let col = x.col(j);
                        for c in 0..channels {
                            for v in &col[c * spatial..(c + 1) * spatial] {
                                let d = v - mean[c];
                                var[c] += d * d;
                            }
                        }
                    }
                    for v in var.iter_mut() {
                        *v /= count;
                    }
                    let inv_std: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut normalized = Matrix::zeros(x.rows(), x.cols());
                    let mut y = Matrix::zeros(x.rows(), x.cols());
                    for j in 0..x.cols() {
                        let col = x.col(j);
                        for c in 0..channels {
                            for k in 0..spatial {
                                let idx = c * spatial + k;
                                let h = (col[idx] - mean[c]) * inv_std[c];
                                normalized.set(idx, j, h);
                                y.set(idx, j, scale[c] * h + shift[c]);
                            }
                        }
                    }
                    Ok((
                        y,
                        CacheEntry::BatchNormTrain {
                            normalized,
                            mean,
                            var,
                            inv_std,
                        },
                    ))
                }
                Mode::Eval => {
                    let inv_std: Vec<f64> = running_var
                        .iter()
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .collect();
                    let mut normalized = Matrix::zeros(x.rows(), x.cols());
                    let mut y = Matrix::zeros(x.rows(), x.cols());
                    for j in 0..x.cols() {
                        let col = x.col(j);
                        for c in 0..channels {
                            for k in 0..spatial {
                                let idx = c * spatial + k;
                                let h = (col[idx] - running_mean[c]) * inv_std[c];
                                normalized.set(idx, j, h);
                                y.set(idx, j, scale[c] * h + shift[c]);
                            }
                        }
                    }
                    Ok((y, CacheEntry::BatchNormEval { normalized, inv_std }))
                }
            }
        }
        (LayerSpec::Relu, _) => {
            let mut y = x.clone();
            for v in y.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok((y, CacheEntry::Relu { input: x.clone() }))
        }
        (LayerSpec::LeakyRelu { slope }, _) => {
            let mut y = x.clone();
            for v in y.data_mut() {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
            Ok((y, CacheEntry::LeakyRelu { input: x.clone() }))
        }
        (LayerSpec::Tanh, _) => {
            let mut y = x.clone();
            for v in y.data_mut() {
                *v = v.tanh();
            }
            Ok((y.clone(), CacheEntry::Tanh { output: y }))
        }
        (LayerSpec::Flatten, _) | (LayerSpec::Reshape { .. }, _) => {
            Ok((x.clone(), CacheEntry::Passthrough))
        }
        _ => Err(CoreError::config(
            "layer spec and parameters out of sync",
        )),
    }
}

/// Exact gradients of the forward map: parameter gradients plus the gradient
/// with respect to the input batch (which lets rate-term gradients flow
/// through the decoder and back through the encoder along the closed loop).
pub fn backward(
    net: &NetworkParams,
    cache: &ForwardCache,
    grad_output: &Matrix,
) -> Result<(ParamGrads, Matrix)> {
    if grad_output.rows() != net.output_shape().len() || grad_output.cols() != cache.batch {
        return Err(CoreError::arg(format!(
            "backward: gradient shape {}x{} does not match output {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            net.output_shape().len(),
            cache.batch
        )));
    }
    if cache.entries.len() != net.specs.len() {
        return Err(CoreError::arg("backward: stale cache"));
    }
    let mut grads = ParamGrads::zeros_like(net);
    let mut grad = grad_output.clone();
    // walk trainable-tensor slots from the end
    let mut slot = grads.tensors.len();
    for idx in (0..net.specs.len()).rev() {
        let spec = &net.specs[idx];
        let params = &net.layers[idx];
        let entry = &cache.entries[idx];
        match (spec, params, entry) {
            (LayerSpec::Dense { .. }, LayerParams::Dense { weight, .. }, CacheEntry::Dense { input }) => {
                slot -= 2;
                let dw = grad.matmul_transpose_other(input);
                grads.tensors[slot].copy_from_slice(dw.data());
                let db = &mut grads.tensors[slot + 1];
                for j in 0..grad.cols() {
                    for (d, g) in db.iter_mut().zip(grad.col(j)) {
                        *d += g;
                    }
                }
                grad = weight.matmul_transpose_self(&grad);
            }
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                LayerParams::Conv { weight, .. },
                CacheEntry::Conv { input },
            ) => {
                slot -= 2;
                let geom =
                    GeomView::for_conv(&net.shapes[idx], *in_channels, *out_channels, *kernel, *stride, *pad)?;
                let mut dx = Matrix::zeros(input.rows(), input.cols());
                let mut dw = Matrix::zeros(weight.rows(), weight.cols());
                for s in 0..input.cols() {
                    let dy_mat = channels_as_cols(grad.col(s), geom.out_c, geom.small_hw());
                    // bias gradient
                    for c in 0..geom.out_c {
                        let mut acc = 0.0;
                        for o in 0..geom.small_hw() {
                            acc += dy_mat.get(c, o);
                        }
                        grads.tensors[slot + 1][c] += acc;
                    }
                    let cols = geom.gather_patches(input.col(s));
                    dw.axpy(1.0, &dy_mat.matmul_transpose_other(&cols));
                    let dcols = weight.matmul_transpose_self(&dy_mat);
                    geom.scatter_patches(&dcols, dx.col_mut(s));
                }
                for (g, v) in grads.tensors[slot].iter_mut().zip(dw.data()) {
                    *g += v;
                }
                grad = dx;
            }
            (
                LayerSpec::Deconv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                },
                LayerParams::Deconv { weight, .. },
                CacheEntry::Deconv { input },
            ) => {
                slot -= 2;
                let geom = GeomView::for_deconv(
                    &net.shapes[idx],
                    *in_channels,
                    *out_channels,
                    *kernel,
                    *stride,
                    *pad,
                )?;
                let mut dx = Matrix::zeros(input.rows(), input.cols());
                let mut dw = Matrix::zeros(weight.rows(), weight.cols());
                for s in 0..input.cols() {
                    let dy = grad.col(s);
                    for c in 0..geom.out_c {
                        let base = c * geom.big_hw();
                        let mut acc = 0.0;
                        for v in &dy[base..base + geom.big_hw()] {
                            acc += v;
                        }
                        grads.tensors[slot + 1][c] += acc;
                    }
                    let dcols = geom.gather_patches(dy); // out_c*k*k × small_hw
                    let x_mat = channels_as_rows(input.col(s), geom.in_c, geom.small_hw());
                    // forward cols = Wᵀ X  ⇒  dW = X·dcolsᵀ, dX = W·dcols
                    dw.axpy(1.0, &x_mat.matmul_transpose_other(&dcols));
                    let dx_mat = weight.matmul(&dcols); // in_c × small_hw
                    let dxcol = dx.col_mut(s);
                    for c in 0..geom.in_c {
                        for o in 0..geom.small_hw() {
                            dxcol[c * geom.small_hw() + o] = dx_mat.get(c, o);
                        }
                    }
                }
                for (g, v) in grads.tensors[slot].iter_mut().zip(dw.data()) {
                    *g += v;
                }
                grad = dx;
            }
            (
                LayerSpec::BatchNorm,
                LayerParams::BatchNorm { scale, .. },
                CacheEntry::BatchNormTrain {
                    normalized,
                    inv_std,
                    ..
                },
            ) => {
                slot -= 2;
                let (channels, spatial) = bn_layout(&net.shapes[idx]);
                let count = (grad.cols() * spatial) as f64;
                // per-channel reductions
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_h = vec![0.0; channels];
                for j in 0..grad.cols() {
                    let g = grad.col(j);
                    for c in 0..channels {
                        for k in 0..spatial {
                            let idx2 = c * spatial + k;
                            sum_dy[c] += g[idx2];
                            sum_dy_h[c] += g[idx2] * normalized.get(idx2, j);
                        }
                    }
                }
                for c in 0..channels {
                    grads.tensors[slot][c] += sum_dy_h[c];
                    grads.tensors[slot + 1][c] += sum_dy[c];
                }
                let mut dx = Matrix::zeros(grad.rows(), grad.cols());
                for j in 0..grad.cols() {
                    let g = grad.col(j);
                    for c in 0..channels {
                        let coeff = scale[c] * inv_std[c] / count;
                        for k in 0..spatial {
                            let idx2 = c * spatial + k;
                            let h = normalized.get(idx2, j);
                            dx.set(
                                idx2,
                                j,
                                coeff * (count * g[idx2] - sum_dy[c] - h * sum_dy_h[c]),
                            );
                        }
                    }
                }
                grad = dx;
            }
            (
                LayerSpec::BatchNorm,
                LayerParams::BatchNorm { scale, .. },
                CacheEntry::BatchNormEval { normalized, inv_std },
            ) => {
                slot -= 2;
                let (channels, spatial) = bn_layout(&net.shapes[idx]);
                let mut dx = Matrix::zeros(grad.rows(), grad.cols());
                for j in 0..grad.cols() {
                    let g = grad.col(j);
                    for c in 0..channels {
                        for k in 0..spatial {
                            let idx2 = c * spatial + k;
                            grads.tensors[slot][c] += g[idx2] * normalized.get(idx2, j);
                            grads.tensors[slot + 1][c] += g[idx2];
                            dx.set(idx2, j, g[idx2] * scale[c] * inv_std[c]);
                        }
                    }
                }
                grad = dx;
            }
            (LayerSpec::Relu, _, CacheEntry::Relu { input }) => {
                let mut dx = grad;
                for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if *x < 0.0 {
                        *d = 0.0;
                    }
                }
                grad = dx;
            }
            (LayerSpec::LeakyRelu { slope }, _, CacheEntry::LeakyRelu { input }) => {
                let mut dx = grad;
                for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if *x < 0.0 {
                        *d *= slope;
                    }
                }
                grad = dx;
            }
            (LayerSpec::Tanh, _, CacheEntry::Tanh { output }) => {
                let mut dx = grad;
                for (d, y) in dx.data_mut().iter_mut().zip(output.data()) {
                    *d *= 1.0 - y * y;
                }
                grad = dx;
            }
            (LayerSpec::Flatten, _, CacheEntry::Passthrough)
            | (LayerSpec::Reshape { .. }, _, CacheEntry::Passthrough) => {}
            _ => {
                return Err(CoreError::arg(
                    "backward: cache does not match network layers",
                ))
            }
        }
    }
    debug_assert_eq!(slot, 0);
    Ok((grads, grad))
}

/// Shared patch geometry for conv (gather) and deconv (scatter). The "big"
/// side is the high-resolution tensor (conv input / deconv output); the
/// "small" side is the strided one.
struct GeomView {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    big_h: usize,
    big_w: usize,
    small_h: usize,
    small_w: usize,
    /// channel count on the big side (conv: in_c, deconv: out_c)
    big_c: usize,
}

impl GeomView {
    fn for_conv(
        in_shape: &Shape,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (h, w) = match in_shape {
            Shape::Image { height, width, .. } => (*height, *width),
            _ => return Err(CoreError::config("conv needs image input")),
        };
        Ok(Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            big_h: h,
            big_w: w,
            small_h: conv_out_extent(h, kernel, stride, pad)?,
            small_w: conv_out_extent(w, kernel, stride, pad)?,
            big_c: in_c,
        })
    }

    fn for_deconv(
        in_shape: &Shape,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (h, w) = match in_shape {
            Shape::Image { height, width, .. } => (*height, *width),
            _ => return Err(CoreError::config("deconv needs image input")),
        };
        Ok(Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            big_h: deconv_out_extent(h, kernel, stride, pad)?,
            big_w: deconv_out_extent(w, kernel, stride, pad)?,
            small_h: h,
            small_w: w,
            big_c: out_c,
        })
    }

    fn small_hw(&self) -> usize {
        self.small_h * self.small_w
    }

    fn big_hw(&self) -> usize {
        self.big_h * self.big_w
    }

    /// im2col on the big side: (big_c·k·k) × small_hw.
    fn gather_patches(&self, big: &[f64]) -> Matrix {
        let k = self.kernel;
        let mut cols = Matrix::zeros(self.big_c * k * k, self.small_hw());
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let col_idx = oy * self.small_w + ox;
                let col = cols.col_mut(col_idx);
                for c in 0..self.big_c {
                    let plane = c * self.big_hw();
                    for ky in 0..k {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..k {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            let dst = (c * k + ky) * k + kx;
                            if y >= 0 && (y as usize) < self.big_h && x >= 0 && (x as usize) < self.big_w
                            {
                                col[dst] = big[plane + y as usize * self.big_w + x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// col2im-add, the exact adjoint of [`Self::gather_patches`].
    fn scatter_patches(&self, cols: &Matrix, big: &mut [f64]) {
        let k = self.kernel;
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let col = cols.col(oy * self.small_w + ox);
                for c in 0..self.big_c {
                    let plane = c * self.big_hw();
                    for ky in 0..k {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..k {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            let src = (c * k + ky) * k + kx;
                            if y >= 0 && (y as usize) < self.big_h && x >= 0 && (x as usize) < self.big_w
                            {
                                big[plane + y as usize * self.big_w + x as usize] += col[src];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// View a channel-major flat sample as a (channels × spatial) matrix.
fn channels_as_rows(sample: &[f64], channels: usize, spatial: usize) -> Matrix {
    let mut m = Matrix::zeros(channels, spatial);
    for c in 0..channels {
        for o in 0..spatial {
            m.set(c, o, sample[c * spatial + o]);
        }
    }
    m
}

/// Same view for gradients arriving as flat columns.
fn channels_as_cols(sample: &[f64], channels: usize, spatial: usize) -> Matrix {
    channels_as_rows(sample, channels, spatial)
}

/// The four-layer convolutional encoder: 32×32×nc down to a flat nz vector.
pub fn conv_encoder_specs(nc: usize, nz: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            in_channels: nc,
            out_channels: 64,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::leaky_relu(),
        LayerSpec::Conv {
            in_channels: 64,
            out_channels: 128,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::leaky_relu(),
        LayerSpec::Conv {
            in_channels: 128,
            out_channels: 256,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::leaky_relu(),
        LayerSpec::Conv {
            in_channels: 256,
            out_channels: nz,
            kernel: 4,
            stride: 1,
            pad: 0,
        },
        LayerSpec::Flatten,
    ]
}

/// The four-layer deconvolutional decoder: flat nz back to 32×32×nc in [−1,1].
pub fn conv_decoder_specs(nz: usize, nc: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Reshape {
            channels: nz,
            height: 1,
            width: 1,
        },
        LayerSpec::Deconv {
            in_channels: nz,
            out_channels: 256,
            kernel: 4,
            stride: 1,
            pad: 0,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Deconv {
            in_channels: 256,
            out_channels: 128,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Deconv {
            in_channels: 128,
            out_channels: 64,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Deconv {
            in_channels: 64,
            out_channels: nc,
            kernel: 4,
            stride: 2,
            pad: 1,
        },
        LayerSpec::Tanh,
    ]
}

/// Dense encoder used by the fast CPU profile: lReLU hidden layers, linear head.
pub fn dense_encoder_specs(input_dim: usize, hidden: &[usize], nz: usize) -> Vec<LayerSpec> {
    dense_encoder_specs_bn(input_dim, hidden, nz, false)
}

pub fn dense_encoder_specs_bn(
    input_dim: usize,
    hidden: &[usize],
    nz: usize,
    batchnorm: bool,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut current = input_dim;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            input: current,
            output: h,
        });
        if batchnorm {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(LayerSpec::leaky_relu());
        current = h;
    }
    specs.push(LayerSpec::Dense {
        input: current,
        output: nz,
    });
    specs
}

/// Dense decoder mirror: ReLU hidden layers, Tanh output into [−1, 1].
pub fn dense_decoder_specs(nz: usize, hidden: &[usize], output_dim: usize) -> Vec<LayerSpec> {
    dense_decoder_specs_bn(nz, hidden, output_dim, false)
}

pub fn dense_decoder_specs_bn(
    nz: usize,
    hidden: &[usize],
    output_dim: usize,
    batchnorm: bool,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut current = nz;
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            input: current,
            output: h,
        });
        if batchnorm {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(LayerSpec::Relu);
        current = h;
    }
    specs.push(LayerSpec::Dense {
        input: current,
        output: output_dim,
    });
    specs.push(LayerSpec::Tanh);
    specs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut RunRng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn same_seed_same_params() {
        let specs = dense_encoder_specs(6, &[5], 3);
        let a = init_params(&specs, Shape::Flat(6), 11).unwrap();
        let b = init_params(&specs, Shape::Flat(6), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_std_close_to_inverse_sqrt_fanin() {
        let specs = vec![LayerSpec::Dense { input: 10, output: 10 }];
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for seed in 0..10u64 {
            let net = init_params(&specs, Shape::Flat(10), seed).unwrap();
            if let LayerParams::Dense { weight, .. } = &net.layers()[0] {
                sq_sum += weight.data().iter().map(|v| v * v).sum::<f64>();
                count += weight.data().len();
            }
        }
        let std = (sq_sum / count as f64).sqrt();
        let target = 1.0 / 10f64.sqrt();
        assert!(
            (std - target).abs() < 0.2 * target,
            "std {std}, target {target}"
        );
    }

    #[test]
    fn identity_dense_layer_is_identity_map() {
        let specs = vec![LayerSpec::Dense { input: 4, output: 4 }];
        let mut net = init_params(&specs, Shape::Flat(4), 0).unwrap();
        if let LayerParams::Dense { weight, bias } = &mut net.layers_mut()[0] {
            *weight = Matrix::identity(4);
            for b in bias.iter_mut() {
                *b = 0.0;
            }
        }
        let mut rng = RunRng::seed_from_u64(1);
        let x = random_batch(&mut rng, 4, 5);
        let (y, _) = forward(&net, &x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tanh_output_bounded() {
        let specs = dense_decoder_specs(3, &[8], 6);
        let net = init_params(&specs, Shape::Flat(3), 2).unwrap();
        let mut rng = RunRng::seed_from_u64(3);
        let x = random_batch(&mut rng, 3, 7).scaled(10.0);
        let (y, _) = forward(&net, &x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn conv_encoder_shapes_match_architecture_tables() {
        let specs = conv_encoder_specs(1, 128);
        let net = init_params(
            &specs,
            Shape::Image {
                channels: 1,
                height: 32,
                width: 32,
            },
            0,
        )
        .unwrap();
        // first conv: 32×32×1 → 16×16×64
        assert_eq!(
            net.shapes[1],
            Shape::Image {
                channels: 64,
                height: 16,
                width: 16
            }
        );
        assert_eq!(*net.output_shape(), Shape::Flat(128));

        let dec = init_params(&conv_decoder_specs(128, 1), Shape::Flat(128), 0).unwrap();
        assert_eq!(
            *dec.output_shape(),
            Shape::Image {
                channels: 1,
                height: 32,
                width: 32
            }
        );
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let specs = vec![
            LayerSpec::Dense { input: 4, output: 3 },
            LayerSpec::Dense { input: 4, output: 2 },
        ];
        assert!(matches!(
            init_params(&specs, Shape::Flat(4), 0),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn eval_forward_is_pure() {
        let specs = vec![
            LayerSpec::Dense { input: 3, output: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Tanh,
        ];
        let net = init_params(&specs, Shape::Flat(3), 5).unwrap();
        let snapshot = net.clone();
        let mut rng = RunRng::seed_from_u64(6);
        let x = random_batch(&mut rng, 3, 4);
        let _ = forward(&net, &x, Mode::Eval).unwrap();
        let _ = forward(&net, &x, Mode::Train).unwrap();
        assert_eq!(net, snapshot, "forward must not mutate parameters");
    }

    #[test]
    fn commit_batchnorm_updates_running_stats() {
        let specs = vec![LayerSpec::BatchNorm];
        let mut net = init_params(&specs, Shape::Flat(2), 0).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 3.0], &[2.0, 6.0]]);
        let (_, cache) = forward(&net, &x, Mode::Train).unwrap();
        commit_batchnorm(&mut net, &cache);
        if let LayerParams::BatchNorm {
            running_mean,
            running_var,
            ..
        } = &net.layers()[0]
        {
            // batch mean (2, 4), batch var (1, 4); running = 0.9*old + 0.1*batch
            assert!((running_mean[0] - 0.2).abs() < 1e-12);
            assert!((running_mean[1] - 0.4).abs() < 1e-12);
            assert!((running_var[0] - (0.9 + 0.1)).abs() < 1e-12);
            assert!((running_var[1] - (0.9 + 0.4)).abs() < 1e-12);
        } else {
            panic!("expected batchnorm layer");
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let specs = dense_encoder_specs(4, &[5], 3);
        let net = init_params(&specs, Shape::Flat(4), 7).unwrap();
        let mut rng = RunRng::seed_from_u64(8);
        let x = random_batch(&mut rng, 4, 6);
        let (y, cache) = forward(&net, &x, Mode::Train).unwrap();
        let zero = Matrix::zeros(y.rows(), y.cols());
        let (grads, dx) = backward(&net, &cache, &zero).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }

    // Probe-based finite-difference check: L = <probe, forward(x)>.
    fn fd_check(specs: &[LayerSpec], input_shape: Shape, mode: Mode, tol: f64, seed: u64) {
        let net = init_params(specs, input_shape.clone(), seed).unwrap();
        let mut rng = RunRng::seed_from_u64(seed + 1000);
        let x = random_batch(&mut rng, input_shape.len(), 3);
        let (y, cache) = forward(&net, &x, mode).unwrap();
        let probe = random_batch(&mut rng, y.rows(), y.cols());
        let (grads, dx) = backward(&net, &cache, &probe).unwrap();

        let value = |net: &NetworkParams, x: &Matrix| -> f64 {
            let (out, _) = forward(net, x, mode).unwrap();
            out.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let h = 1e-5;
        // parameter gradients
        let mut max_rel = 0.0f64;
        let tensor_count = net.trainable_tensors().len();
        for ti in 0..tensor_count {
            let len = net.trainable_tensors()[ti].len();
            for i in 0..len {
                let mut plus = net.clone();
                plus.trainable_tensors_mut()[ti][i] += h;
                let mut minus = net.clone();
                minus.trainable_tensors_mut()[ti][i] -= h;
                let fd = (value(&plus, &x) - value(&minus, &x)) / (2.0 * h);
                let analytic = grads.tensors()[ti][i];
                let denom = fd.abs().max(analytic.abs()).max(1e-4);
                max_rel = max_rel.max((analytic - fd).abs() / denom);
            }
        }
        // input gradients
        for j in 0..x.cols() {
            for i in 0..x.rows() {
                let mut plus = x.clone();
                plus.set(i, j, x.get(i, j) + h);
                let mut minus = x.clone();
                minus.set(i, j, x.get(i, j) - h);
                let fd = (value(&net, &plus) - value(&net, &minus)) / (2.0 * h);
                let analytic = dx.get(i, j);
                let denom = fd.abs().max(analytic.abs()).max(1e-4);
                max_rel = max_rel.max((analytic - fd).abs() / denom);
            }
        }
        assert!(max_rel < tol, "max relative error {max_rel:e} (tol {tol:e})");
    }

    #[test]
    fn dense_tanh_net_matches_finite_differences() {
        let specs = vec![
            LayerSpec::Dense { input: 3, output: 4 },
            LayerSpec::Tanh,
            LayerSpec::Dense { input: 4, output: 2 },
        ];
        fd_check(&specs, Shape::Flat(3), Mode::Train, 1e-5, 31);
    }

    #[test]
    fn leaky_relu_net_matches_finite_differences() {
        let specs = dense_encoder_specs(4, &[6], 3);
        fd_check(&specs, Shape::Flat(4), Mode::Train, 1e-5, 32);
    }

    #[test]
    fn conv_batchnorm_stack_matches_finite_differences() {
        let specs = vec![
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 4,
                stride: 2,
                pad: 1,
            },
            LayerSpec::BatchNorm,
            LayerSpec::leaky_relu(),
        ];
        fd_check(
            &specs,
            Shape::Image {
                channels: 2,
                height: 6,
                width: 6,
            },
            Mode::Train,
            1e-4,
            33,
        );
    }

    #[test]
    fn deconv_stack_matches_finite_differences() {
        let specs = vec![
            LayerSpec::Reshape {
                channels: 3,
                height: 1,
                width: 1,
            },
            LayerSpec::Deconv {
                in_channels: 3,
                out_channels: 2,
                kernel: 4,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Relu,
            LayerSpec::Deconv {
                in_channels: 2,
                out_channels: 1,
                kernel: 4,
                stride: 2,
                pad: 1,
            },
            LayerSpec::Tanh,
        ];
        fd_check(&specs, Shape::Flat(3), Mode::Train, 1e-5, 34);
    }

    #[test]
    fn batchnorm_eval_mode_matches_finite_differences() {
        let specs = vec![
            LayerSpec::Dense { input: 3, output: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Tanh,
        ];
        fd_check(&specs, Shape::Flat(3), Mode::Eval, 1e-5, 35);
    }

    #[test]
    fn composition_backward_equals_chained_backward() {
        let f_specs = dense_encoder_specs(5, &[4], 3);
        let g_specs = dense_decoder_specs(3, &[4], 5);
        let f = init_params(&f_specs, Shape::Flat(5), 41).unwrap();
        let g = init_params(&g_specs, Shape::Flat(3), 42).unwrap();

        let mut combined_specs = f_specs.clone();
        combined_specs.extend(g_specs.clone());
        let mut combined = init_params(&combined_specs, Shape::Flat(5), 0).unwrap();
        // copy f and g parameters into the combined network
        {
            let mut tensors = combined.trainable_tensors_mut();
            let split = f.trainable_tensors().len();
            for (dst, src) in tensors.iter_mut().take(split).zip(f.trainable_tensors()) {
                dst.copy_from_slice(src);
            }
            for (dst, src) in tensors.iter_mut().skip(split).zip(g.trainable_tensors()) {
                dst.copy_from_slice(src);
            }
        }

        let mut rng = RunRng::seed_from_u64(43);
        let x = random_batch(&mut rng, 5, 4);
        let (z, f_cache) = forward(&f, &x, Mode::Train).unwrap();
        let (y, g_cache) = forward(&g, &z, Mode::Train).unwrap();
        let (yc, c_cache) = forward(&combined, &x, Mode::Train).unwrap();
        assert_eq!(y, yc);

        let probe = random_batch(&mut rng, y.rows(), y.cols());
        let (g_grads, dz) = backward(&g, &g_cache, &probe).unwrap();
        let (f_grads, dx) = backward(&f, &f_cache, &dz).unwrap();
        let (c_grads, dxc) = backward(&combined, &c_cache, &probe).unwrap();
        assert_eq!(dx, dxc);
        let chained: Vec<&Vec<f64>> = f_grads.tensors().iter().chain(g_grads.tensors()).collect();
        for (a, b) in c_grads.tensors().iter().zip(chained) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_first_step_hand_case() {
        // scalar parameter w=0, gradient 1: bias-corrected step is exactly -lr
        let specs = vec![LayerSpec::Dense { input: 1, output: 1 }];
        let mut net = init_params(&specs, Shape::Flat(1), 0).unwrap();
        net.trainable_tensors_mut()[0][0] = 0.0;
        net.trainable_tensors_mut()[1][0] = 0.0;
        let mut state = AdamState::new(&net, AdamHyper::default());
        let mut grads = ParamGrads::zeros_like(&net);
        grads.tensors[0][0] = 1.0;
        adam_step(&mut net, &grads, &mut state).unwrap();
        let w = net.trainable_tensors()[0][0];
        assert!((w + 1e-4).abs() < 1e-12, "w = {w}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 2 }];
        let mut net = init_params(&specs, Shape::Flat(2), 3).unwrap();
        let before: Vec<f64> = net.trainable_tensors()[0].to_vec();
        let mut state = AdamState::new(&net, AdamHyper::default());
        let grads = ParamGrads::zeros_like(&net);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net.trainable_tensors()[0], before.as_slice());
    }

    #[test]
    fn adam_trajectories_deterministic() {
        let specs = dense_encoder_specs(3, &[4], 2);
        let run = || {
            let mut net = init_params(&specs, Shape::Flat(3), 9).unwrap();
            let mut state = AdamState::new(&net, AdamHyper::default());
            let mut rng = RunRng::seed_from_u64(10);
            for _ in 0..20 {
                let x = random_batch(&mut rng, 3, 4);
                let (y, cache) = forward(&net, &x, Mode::Train).unwrap();
                let (mut grads, _) = backward(&net, &cache, &y).unwrap();
                grads.scale(0.1);
                adam_step(&mut net, &grads, &mut state).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 3 }];
        let net = init_params(&specs, Shape::Flat(2), 0).unwrap();
        let x = Matrix::zeros(2, 2);
        let x = {
            let mut x = x;
            x.set(0, 0, 1.0);
            x
        };
        let (_, cache) = forward(&net, &x, Mode::Train).unwrap();
        let bad = Matrix::zeros(3, 5);
        assert!(backward(&net, &cache, &bad).is_err());
    }
}
