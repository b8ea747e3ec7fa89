//! Feedforward classifiers with monitored latent taps.
//!
//! A [`ClassifierModel`] is an ordered list of [`LayerSpec`]s over one flat
//! parameter vector. Batches are [`Matrix`] values with one sample per row;
//! image layers read rows as flattened `channel × height × width` tensors.
//! Any layer can be tapped: its post-activation output becomes one of the
//! latent representations `Z_1..Z_M` exposed by [`ForwardTrace`], and
//! gradients injected at a tap are added to whatever flows back from the
//! layers above it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BidoError, Result};
use crate::numerics::{gemm, Matrix};

/// Smallest probability fed to a logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Evaluation batches are split into chunks of this many rows to bound
/// the memory of convolution buffers.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    /// `y = x·W + b` with `W` stored `in_dim × out_dim`.
    Dense,
    Relu,
    /// Valid, stride-1 convolution over a `in_channels × height × width`
    /// input with square `kernel × kernel` filters.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    /// 2×2 max pooling with stride 2; `height` and `width` must be even.
    MaxPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
    SoftmaxOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub tap: bool,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            tap: false,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            tap: false,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize) -> Self {
        let oh = (height + 1).saturating_sub(kernel);
        let ow = (width + 1).saturating_sub(kernel);
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            },
            in_dim: in_channels * height * width,
            out_dim: out_channels * oh * ow,
            tap: false,
        }
    }

    pub fn max_pool2(channels: usize, height: usize, width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2 {
                channels,
                height,
                width,
            },
            in_dim: channels * height * width,
            out_dim: channels * (height / 2) * (width / 2),
            tap: false,
        }
    }

    pub fn softmax(classes: usize) -> Self {
        LayerSpec {
            kind: LayerKind::SoftmaxOutput,
            in_dim: classes,
            out_dim: classes,
            tap: false,
        }
    }

    pub fn tapped(mut self) -> Self {
        self.tap = true;
        self
    }

    fn parameter_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim + self.out_dim,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel * out_channels + out_channels,
            _ => 0,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(BidoError::param(format!("layer {index}: {msg}")));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        match self.kind {
            LayerKind::Dense => Ok(()),
            LayerKind::Relu | LayerKind::SoftmaxOutput => {
                if self.in_dim != self.out_dim {
                    return bad(format!("activation maps {} to {}", self.in_dim, self.out_dim));
                }
                Ok(())
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            } => {
                if kernel == 0 || kernel > height || kernel > width || in_channels == 0 || out_channels == 0 {
                    return bad(format!("invalid convolution geometry {self:?}"));
                }
                let expect = LayerSpec::conv2d(in_channels, out_channels, kernel, height, width);
                if (expect.in_dim, expect.out_dim) != (self.in_dim, self.out_dim) {
                    return bad(format!(
                        "convolution dims {}→{} do not match geometry {}→{}",
                        self.in_dim, self.out_dim, expect.in_dim, expect.out_dim
                    ));
                }
                Ok(())
            }
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            } => {
                if height % 2 != 0 || width % 2 != 0 || channels == 0 {
                    return bad(format!("pooling needs even spatial size, got {height}×{width}"));
                }
                let expect = LayerSpec::max_pool2(channels, height, width);
                if (expect.in_dim, expect.out_dim) != (self.in_dim, self.out_dim) {
                    return bad("pooling dims do not match geometry".into());
                }
                Ok(())
            }
        }
    }
}

/// Named architectures for configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Dense ReLU network; every hidden activation is tapped.
    Mlp { hidden: Vec<usize> },
    /// Two 5×5 convolutions with max pooling and three dense layers, for
    /// 28×28 single-channel inputs. Taps: pooled convolution features and
    /// both hidden dense activations.
    Lenet,
    /// Explicit layer list.
    Layers { layers: Vec<LayerSpec> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp {
            hidden: vec![512, 256, 128],
        }
    }
}

impl Architecture {
    pub fn layers(&self, input_dim: usize, classes: usize) -> Result<Vec<LayerSpec>> {
        match self {
            Architecture::Mlp { hidden } => Ok(mlp_layers(input_dim, hidden, classes)),
            Architecture::Lenet => {
                if input_dim != 784 {
                    return Err(BidoError::config(
                        "model.kind",
                        format!("lenet expects 28×28 inputs (784 values), dataset has {input_dim}"),
                    ));
                }
                Ok(lenet_layers(classes))
            }
            Architecture::Layers { layers } => Ok(layers.clone()),
        }
    }

    pub fn build(&self, input_dim: usize, classes: usize, seed: u64) -> Result<ClassifierModel> {
        ClassifierModel::new(self.layers(input_dim, classes)?, classes, input_dim, seed)
    }
}

pub fn mlp_layers(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::dense(prev, h));
        layers.push(LayerSpec::relu(h).tapped());
        prev = h;
    }
    layers.push(LayerSpec::dense(prev, classes));
    layers.push(LayerSpec::softmax(classes));
    layers
}

pub fn lenet_layers(classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(1, 6, 5, 28, 28),
        LayerSpec::relu(6 * 24 * 24),
        LayerSpec::max_pool2(6, 24, 24),
        LayerSpec::conv2d(6, 16, 5, 12, 12),
        LayerSpec::relu(16 * 8 * 8),
        LayerSpec::max_pool2(16, 8, 8).tapped(),
        LayerSpec::dense(256, 120),
        LayerSpec::relu(120).tapped(),
        LayerSpec::dense(120, 84),
        LayerSpec::relu(84).tapped(),
        LayerSpec::dense(84, classes),
        LayerSpec::softmax(classes),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    class_count: usize,
    input_dim: usize,
}

/// Outputs of every layer for one batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Matrix,
    outputs: Vec<Matrix>,
    /// Per pooling layer, the flat input index chosen for each output entry.
    pool_argmax: Vec<Vec<u32>>,
    tap_layers: Vec<usize>,
}

impl ForwardTrace {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Latent batches `Z_1..Z_M` in layer order.
    pub fn taps(&self) -> Vec<&Matrix> {
        self.tap_layers.iter().map(|&i| &self.outputs[i]).collect()
    }

    pub fn tap_count(&self) -> usize {
        self.tap_layers.len()
    }

    pub fn probabilities(&self) -> &Matrix {
        self.outputs.last().expect("model has layers")
    }

    /// Pre-softmax scores.
    pub fn logits(&self) -> &Matrix {
        let n = self.outputs.len();
        if n >= 2 {
            &self.outputs[n - 2]
        } else {
            &self.input
        }
    }

    /// `−ln max(p_true, 1e-12)` per sample.
    pub fn per_sample_losses(&self, labels: &Matrix) -> Result<Vec<f64>> {
        let classes = check_one_hot(labels)?;
        let probs = self.probabilities();
        if labels.shape() != probs.shape() {
            return Err(BidoError::dim(format!(
                "labels {:?} against probabilities {:?}",
                labels.shape(),
                probs.shape()
            )));
        }
        Ok(classes
            .iter()
            .enumerate()
            .map(|(r, &c)| -probs[(r, c)].max(PROBABILITY_FLOOR).ln())
            .collect())
    }
}

/// Upstream gradients for [`ClassifierModel::backward`].
#[derive(Clone, Debug, Default)]
pub struct Upstream {
    /// With respect to the logits, bypassing the softmax Jacobian.
    pub logits: Option<Matrix>,
    /// With respect to the softmax probabilities.
    pub probabilities: Option<Matrix>,
    /// One entry per tap, in tap order; `None` injects nothing.
    pub taps: Vec<Option<Matrix>>,
}

impl Upstream {
    pub fn logits(g: Matrix) -> Self {
        Upstream {
            logits: Some(g),
            ..Default::default()
        }
    }

    pub fn probabilities(g: Matrix) -> Self {
        Upstream {
            probabilities: Some(g),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same layout as [`ClassifierModel::params`].
    pub params: Vec<f64>,
    pub input: Option<Matrix>,
}

fn check_one_hot(labels: &Matrix) -> Result<Vec<usize>> {
    labels
        .row_iter()
        .enumerate()
        .map(|(r, row)| {
            let mut hot = None;
            for (c, &v) in row.iter().enumerate() {
                if v == 1.0 && hot.is_none() {
                    hot = Some(c);
                } else if v != 0.0 {
                    return Err(BidoError::param(format!("label row {r} is not one-hot")));
                }
            }
            hot.ok_or_else(|| BidoError::param(format!("label row {r} is not one-hot")))
        })
        .collect()
}

/// Class index of every one-hot label row.
pub fn label_indices(labels: &Matrix) -> Result<Vec<usize>> {
    check_one_hot(labels)
}

/// Mean of `−ln max(p_true, 1e-12)` over the batch.
pub fn cross_entropy(probabilities: &Matrix, labels: &Matrix) -> Result<f64> {
    Ok(cross_entropy_with_gradient(probabilities, labels)?.0)
}

/// Cross-entropy and its gradient with respect to the logits,
/// `(p − y)/B` (zero for samples whose true-class probability sits at the
/// clamp).
pub fn cross_entropy_with_gradient(probabilities: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    if probabilities.shape() != labels.shape() {
        return Err(BidoError::dim(format!(
            "probabilities {:?} against labels {:?}",
            probabilities.shape(),
            labels.shape()
        )));
    }
    let classes = check_one_hot(labels)?;
    let b = probabilities.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probabilities.rows(), probabilities.cols());
    for (r, &c) in classes.iter().enumerate() {
        let p = probabilities[(r, c)];
        loss -= p.max(PROBABILITY_FLOOR).ln();
        if p >= PROBABILITY_FLOOR {
            let g = grad.row_mut(r);
            for (gv, pv) in g.iter_mut().zip(probabilities.row(r)) {
                *gv = pv / b;
            }
            g[c] -= 1.0 / b;
        }
    }
    Ok((loss / b, grad))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise `ln softmax`, computed as `z − max − ln Σ exp(z − max)`.
pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Output spatial size of a valid stride-1 convolution.
fn conv_out(height: usize, width: usize, kernel: usize) -> (usize, usize) {
    (height - kernel + 1, width - kernel + 1)
}

/// Unfolds a batch into `(C·k·k) × (B·P)` patch columns.
fn im2col(x: &Matrix, c_in: usize, k: usize, h: usize, w: usize) -> Matrix {
    let (oh, ow) = conv_out(h, w, k);
    let p = oh * ow;
    let b = x.rows();
    let mut col = Matrix::zeros(c_in * k * k, b * p);
    let width = b * p;
    let data = col.as_mut_slice();
    for s in 0..b {
        let xs = x.row(s);
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut data[r * width + s * p..r * width + (s + 1) * p];
                    for oy in 0..oh {
                        let src = ci * h * w + (oy + ky) * w + kx;
                        dst[oy * ow..(oy + 1) * ow].copy_from_slice(&xs[src..src + ow]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Matrix, b: usize, c_in: usize, k: usize, h: usize, w: usize) -> Matrix {
    let (oh, ow) = conv_out(h, w, k);
    let p = oh * ow;
    let width = b * p;
    let mut dx = Matrix::zeros(b, c_in * h * w);
    let src = dcol.as_slice();
    for s in 0..b {
        let xs = dx.row_mut(s);
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let row = &src[r * width + s * p..r * width + (s + 1) * p];
                    for oy in 0..oh {
                        let dst = ci * h * w + (oy + ky) * w + kx;
                        for (d, v) in xs[dst..dst + ow].iter_mut().zip(&row[oy * ow..(oy + 1) * ow]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

impl ClassifierModel {
    /// Validates the layer list and draws Glorot-uniform weights
    /// (`±sqrt(6/(fan_in + fan_out))`) with zero biases from `seed`.
    pub fn new(layers: Vec<LayerSpec>, class_count: usize, input_dim: usize, seed: u64) -> Result<Self> {
        let mut model = Self::with_zero_params(layers, class_count, input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in model.layers.clone().iter().enumerate() {
            let (fan_in, fan_out, weights) = match layer.kind {
                LayerKind::Dense => (layer.in_dim, layer.out_dim, layer.in_dim * layer.out_dim),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                    in_channels * kernel * kernel * out_channels,
                ),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = model.offsets[i];
            for w in &mut model.params[off..off + weights] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    /// Same architecture checks as [`ClassifierModel::new`], all parameters zero.
    pub fn with_zero_params(layers: Vec<LayerSpec>, class_count: usize, input_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(BidoError::param("model needs at least one layer"));
        }
        if class_count < 2 {
            return Err(BidoError::param(format!("need at least 2 classes, got {class_count}")));
        }
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
            if layer.in_dim != prev {
                return Err(BidoError::dim(format!(
                    "layer {i} expects {} inputs but receives {prev}",
                    layer.in_dim
                )));
            }
            prev = layer.out_dim;
            let last = i + 1 == layers.len();
            if (layer.kind == LayerKind::SoftmaxOutput) != last {
                return Err(BidoError::param(
                    "softmax_output must appear exactly once, as the last layer",
                ));
            }
        }
        if prev != class_count {
            return Err(BidoError::dim(format!(
                "output width {prev} differs from class count {class_count}"
            )));
        }
        if !layers.iter().any(|l| l.tap) {
            return Err(BidoError::param("model needs at least one tapped layer"));
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.parameter_count();
        }
        Ok(ClassifierModel {
            layers,
            offsets,
            params: vec![0.0; total],
            class_count,
            input_dim,
        })
    }

    /// The 784-512-256-128-10 ReLU network with all three hidden layers tapped.
    pub fn default_mlp(seed: u64) -> Self {
        Architecture::default().build(784, 10, seed).expect("valid preset")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(BidoError::dim(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tap_count(&self) -> usize {
        self.layers.iter().filter(|l| l.tap).count()
    }

    pub fn tap_dims(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.tap).map(|l| l.out_dim).collect()
    }

    fn layer_params(&self, i: usize) -> &[f64] {
        &self.params[self.offsets[i]..self.offsets[i] + self.layers[i].parameter_count()]
    }

    pub fn forward_with_taps(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim {
            return Err(BidoError::dim(format!(
                "inputs have {} features, model expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut pool_argmax = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { batch } else { &outputs[i - 1] };
            let y = match layer.kind {
                LayerKind::Dense => self.dense_forward(i, x),
                LayerKind::Relu => {
                    let mut y = x.clone();
                    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    y
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                } => self.conv_forward(i, x, in_channels, out_channels, kernel, height, width),
                LayerKind::MaxPool2 {
                    channels,
                    height,
                    width,
                } => {
                    let (y, idx) = pool_forward(x, channels, height, width);
                    pool_argmax[i] = idx;
                    y
                }
                LayerKind::SoftmaxOutput => softmax_rows(x),
            };
            outputs.push(y);
        }
        let tap_layers = (0..self.layers.len()).filter(|&i| self.layers[i].tap).collect();
        Ok(ForwardTrace {
            input: batch.clone(),
            outputs,
            pool_argmax,
            tap_layers,
        })
    }

    /// Class probabilities, evaluated in bounded-size chunks.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.chunked(batch, |t| t.probabilities().clone())
    }

    pub fn predict_logits(&self, batch: &Matrix) -> Result<Matrix> {
        self.chunked(batch, |t| t.logits().clone())
    }

    fn chunked(&self, batch: &Matrix, pick: impl Fn(&ForwardTrace) -> Matrix) -> Result<Matrix> {
        if batch.rows() <= EVAL_CHUNK {
            return Ok(pick(&self.forward_with_taps(batch)?));
        }
        let mut data = Vec::with_capacity(batch.rows() * self.class_count);
        let mut start = 0;
        while start < batch.rows() {
            let end = (start + EVAL_CHUNK).min(batch.rows());
            let idx: Vec<usize> = (start..end).collect();
            let out = pick(&self.forward_with_taps(&batch.select_rows(&idx))?);
            data.extend_from_slice(out.as_slice());
            start = end;
        }
        Matrix::from_vec(batch.rows(), self.class_count, data)
    }

    /// Fraction of rows whose arg-max class matches the one-hot label.
    pub fn accuracy(&self, inputs: &Matrix, labels: &Matrix) -> Result<f64> {
        let truth = label_indices(labels)?;
        let probs = self.predict(inputs)?;
        let hits = probs
            .row_iter()
            .zip(&truth)
            .filter(|(row, &c)| argmax(row) == c)
            .count();
        Ok(hits as f64 / truth.len().max(1) as f64)
    }

    fn dense_forward(&self, i: usize, x: &Matrix) -> Matrix {
        let (din, dout) = (self.layers[i].in_dim, self.layers[i].out_dim);
        let p = self.layer_params(i);
        let (w, b) = p.split_at(din * dout);
        let mut y = Matrix::zeros(x.rows(), dout);
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm(
            x.rows(),
            din,
            dout,
            1.0,
            x.as_slice(),
            din as isize,
            1,
            w,
            dout as isize,
            1,
            1.0,
            y.as_mut_slice(),
            dout as isize,
            1,
        );
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_forward(
        &self,
        i: usize,
        x: &Matrix,
        c_in: usize,
        c_out: usize,
        k: usize,
        h: usize,
        w: usize,
    ) -> Matrix {
        let (oh, ow) = conv_out(h, w, k);
        let p = oh * ow;
        let b = x.rows();
        let ckk = c_in * k * k;
        let params = self.layer_params(i);
        let (wt, bias) = params.split_at(ckk * c_out);
        let col = im2col(x, c_in, k, h, w);
        // (c_out × B·P) = Wᵀ · col
        let mut yt = vec![0.0; c_out * b * p];
        gemm(
            c_out,
            ckk,
            b * p,
            1.0,
            wt,
            1,
            c_out as isize,
            col.as_slice(),
            (b * p) as isize,
            1,
            0.0,
            &mut yt,
            (b * p) as isize,
            1,
        );
        let mut y = Matrix::zeros(b, c_out * p);
        for s in 0..b {
            let row = y.row_mut(s);
            for co in 0..c_out {
                let src = &yt[co * b * p + s * p..co * b * p + (s + 1) * p];
                for (d, v) in row[co * p..(co + 1) * p].iter_mut().zip(src) {
                    *d = v + bias[co];
                }
            }
        }
        y
    }

    /// Gradient of the objective with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<Vec<f64>> {
        Ok(self.backward_impl(trace, upstream, true, false)?.params)
    }

    /// Gradient with respect to the input batch only.
    pub fn input_gradient(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<Matrix> {
        let g = self.backward_impl(trace, upstream, false, true)?;
        Ok(g.input.expect("input gradient requested"))
    }

    /// Parameter and input gradients in one pass.
    pub fn backward_full(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<Gradients> {
        self.backward_impl(trace, upstream, true, true)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        upstream: &Upstream,
        want_params: bool,
        want_input: bool,
    ) -> Result<Gradients> {
        let b = trace.batch_size();
        if trace.outputs.len() != self.layers.len() {
            return Err(BidoError::dim("trace was produced by a different model"));
        }
        if !upstream.taps.is_empty() && upstream.taps.len() != trace.tap_layers.len() {
            return Err(BidoError::dim(format!(
                "{} tap gradients for {} taps",
                upstream.taps.len(),
                trace.tap_layers.len()
            )));
        }
        let mut tap_grads: Vec<Option<&Matrix>> = vec![None; self.layers.len()];
        for (j, g) in upstream.taps.iter().enumerate() {
            if let Some(g) = g {
                let layer = trace.tap_layers[j];
                if g.shape() != trace.outputs[layer].shape() {
                    return Err(BidoError::dim(format!(
                        "tap {j} gradient {:?} against latent {:?}",
                        g.shape(),
                        trace.outputs[layer].shape()
                    )));
                }
                tap_grads[layer] = Some(g);
            }
        }
        let mut param_grad = if want_params {
            vec![0.0; self.params.len()]
        } else {
            Vec::new()
        };
        let last = self.layers.len() - 1;
        // Gradient with respect to the output of the current layer; `None`
        // means identically zero.
        let mut g: Option<Matrix> = None;
        let mut logits_grad: Option<Matrix> = None;
        if let Some(gp) = &upstream.probabilities {
            let probs = trace.probabilities();
            if gp.shape() != probs.shape() {
                return Err(BidoError::dim(format!(
                    "output gradient {:?} against probabilities {:?}",
                    gp.shape(),
                    probs.shape()
                )));
            }
            g = Some(gp.clone());
        }
        if let Some(gl) = &upstream.logits {
            if gl.shape() != trace.logits().shape() {
                return Err(BidoError::dim(format!(
                    "logit gradient {:?} against logits {:?}",
                    gl.shape(),
                    trace.logits().shape()
                )));
            }
            logits_grad = Some(gl.clone());
        }
        for i in (0..=last).rev() {
            if let Some(t) = tap_grads[i] {
                match g.as_mut() {
                    Some(acc) => acc.add_assign(t)?,
                    None => g = Some(t.clone()),
                }
            }
            let layer = self.layers[i];
            let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let need_dx = i > 0 || want_input;
            g = match layer.kind {
                LayerKind::SoftmaxOutput => {
                    let mut out = logits_grad.take();
                    if let Some(gp) = g.take() {
                        let p = &trace.outputs[i];
                        let mut d = Matrix::zeros(b, layer.out_dim);
                        for r in 0..b {
                            let pr = p.row(r);
                            let gr = gp.row(r);
                            let s: f64 = pr.iter().zip(gr).map(|(a, c)| a * c).sum();
                            for ((dv, pv), gv) in d.row_mut(r).iter_mut().zip(pr).zip(gr) {
                                *dv = pv * (gv - s);
                            }
                        }
                        match out.as_mut() {
                            Some(o) => o.add_assign(&d)?,
                            None => out = Some(d),
                        }
                    }
                    out
                }
                _ => match g.take() {
                    None => None,
                    Some(gy) => self.layer_backward(i, x, &gy, trace, &mut param_grad, want_params, need_dx),
                },
            };
        }
        let input = if want_input {
            Some(g.unwrap_or_else(|| Matrix::zeros(b, self.input_dim)))
        } else {
            None
        };
        Ok(Gradients {
            params: param_grad,
            input,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        i: usize,
        x: &Matrix,
        gy: &Matrix,
        trace: &ForwardTrace,
        param_grad: &mut [f64],
        want_params: bool,
        need_dx: bool,
    ) -> Option<Matrix> {
        let layer = self.layers[i];
        let b = x.rows();
        let off = self.offsets[i];
        match layer.kind {
            LayerKind::Dense => {
                let (din, dout) = (layer.in_dim, layer.out_dim);
                let w = &self.params[off..off + din * dout];
                if want_params {
                    let (gw, gb) = param_grad[off..off + din * dout + dout].split_at_mut(din * dout);
                    // dW = Xᵀ·G
                    gemm(
                        din,
                        b,
                        dout,
                        1.0,
                        x.as_slice(),
                        1,
                        din as isize,
                        gy.as_slice(),
                        dout as isize,
                        1,
                        0.0,
                        gw,
                        dout as isize,
                        1,
                    );
                    for row in gy.row_iter() {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if !need_dx {
                    return None;
                }
                // dX = G·Wᵀ
                let mut dx = Matrix::zeros(b, din);
                gemm(
                    b,
                    dout,
                    din,
                    1.0,
                    gy.as_slice(),
                    dout as isize,
                    1,
                    w,
                    1,
                    dout as isize,
                    0.0,
                    dx.as_mut_slice(),
                    din as isize,
                    1,
                );
                Some(dx)
            }
            LayerKind::Relu => {
                if !need_dx {
                    return None;
                }
                let mut dx = gy.clone();
                for (d, xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                Some(dx)
            }
            LayerKind::MaxPool2 { .. } => {
                if !need_dx {
                    return None;
                }
                let idx = &trace.pool_argmax[i];
                let mut dx = Matrix::zeros(b, layer.in_dim);
                for s in 0..b {
                    let gr = gy.row(s);
                    let ir = &idx[s * layer.out_dim..(s + 1) * layer.out_dim];
                    let dr = dx.row_mut(s);
                    for (gv, &j) in gr.iter().zip(ir) {
                        dr[j as usize] += gv;
                    }
                }
                Some(dx)
            }
            LayerKind::Conv2d {
                in_channels: c_in,
                out_channels: c_out,
                kernel: k,
                height: h,
                width: w,
            } => {
                let (oh, ow) = conv_out(h, w, k);
                let p = oh * ow;
                let ckk = c_in * k * k;
                let bp = b * p;
                // Rearrange G into (c_out × B·P).
                let mut gt = vec![0.0; c_out * bp];
                for s in 0..b {
                    let row = gy.row(s);
                    for co in 0..c_out {
                        gt[co * bp + s * p..co * bp + (s + 1) * p].copy_from_slice(&row[co * p..(co + 1) * p]);
                    }
                }
                let weights = &self.params[off..off + ckk * c_out];
                if want_params {
                    let col = im2col(x, c_in, k, h, w);
                    let (gw, gb) = param_grad[off..off + ckk * c_out + c_out].split_at_mut(ckk * c_out);
                    // dW (ckk × c_out) = col · Gtᵀ
                    gemm(
                        ckk,
                        bp,
                        c_out,
                        1.0,
                        col.as_slice(),
                        bp as isize,
                        1,
                        &gt,
                        1,
                        bp as isize,
                        0.0,
                        gw,
                        c_out as isize,
                        1,
                    );
                    for co in 0..c_out {
                        gb[co] += gt[co * bp..(co + 1) * bp].iter().sum::<f64>();
                    }
                }
                if !need_dx {
                    return None;
                }
                // dcol (ckk × B·P) = W · Gt
                let mut dcol = Matrix::zeros(ckk, bp);
                gemm(
                    ckk,
                    c_out,
                    bp,
                    1.0,
                    weights,
                    c_out as isize,
                    1,
                    &gt,
                    bp as isize,
                    1,
                    0.0,
                    dcol.as_mut_slice(),
                    bp as isize,
                    1,
                );
                Some(col2im(&dcol, b, c_in, k, h, w))
            }
            LayerKind::SoftmaxOutput => unreachable!("handled by the caller"),
        }
    }
}

fn pool_forward(x: &Matrix, c: usize, h: usize, w: usize) -> (Matrix, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let out_dim = c * oh * ow;
    let mut y = Matrix::zeros(x.rows(), out_dim);
    let mut idx = vec![0u32; x.rows() * out_dim];
    for s in 0..x.rows() {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        let is = &mut idx[s * out_dim..(s + 1) * out_dim];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if xs[cand] > xs[best] {
                            best = cand;
                        }
                    }
                    let o = ch * oh * ow + oy * ow + ox;
                    ys[o] = xs[best];
                    is[o] = best as u32;
                }
            }
        }
    }
    (y, idx)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether `class` is among the `k` largest entries (ties broken by index).
pub fn in_top_k(row: &[f64], class: usize, k: usize) -> bool {
    let target = row[class];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < class))
        .count();
    ahead < k
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BIDOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Hash of the configuration that produced the model.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    layers: Vec<LayerSpec>,
    class_count: usize,
    input_dim: usize,
    parameter_count: usize,
    meta: CheckpointMeta,
}

/// Writes `magic | u32 version | u64 header length | JSON header | f64 LE
/// parameters`.
pub fn save_checkpoint(model: &ClassifierModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        layers: model.layers.clone(),
        class_count: model.class_count,
        input_dim: model.input_dim,
        parameter_count: model.params.len(),
        meta: meta.clone(),
    })?;
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * model.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ClassifierModel, CheckpointMeta)> {
    let fmt = |message: String| BidoError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| fmt("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fmt(format!("header: {e}")))?;
    let data = &bytes[20 + hlen..];
    if data.len() != 8 * header.parameter_count {
        return Err(fmt(format!(
            "expected {} parameter bytes, found {}",
            8 * header.parameter_count,
            data.len()
        )));
    }
    let mut model = ClassifierModel::with_zero_params(header.layers, header.class_count, header.input_dim)
        .map_err(|e| fmt(e.to_string()))?;
    let params: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.set_params(params).map_err(|e| fmt(e.to_string()))?;
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_batch(rng: &mut impl Rng, b: usize, d: usize) -> Matrix {
        Matrix::from_fn(b, d, |_, _| rng.random_range(0.0..1.0))
    }

    fn one_hot(labels: &[usize], k: usize) -> Matrix {
        Matrix::from_fn(labels.len(), k, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
    }

    fn small_mlp(seed: u64) -> ClassifierModel {
        ClassifierModel::new(mlp_layers(3, &[4], 2), 2, 3, seed).unwrap()
    }

    fn small_conv(seed: u64) -> ClassifierModel {
        let layers = vec![
            LayerSpec::conv2d(1, 2, 3, 6, 6),
            LayerSpec::relu(32),
            LayerSpec::max_pool2(2, 4, 4).tapped(),
            LayerSpec::dense(8, 3),
            LayerSpec::relu(3).tapped(),
            LayerSpec::dense(3, 3),
            LayerSpec::softmax(3),
        ];
        let mut m = ClassifierModel::new(layers, 3, 36, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        // Nonzero biases so every path is exercised.
        for p in m.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        m
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let m = ClassifierModel::with_zero_params(mlp_layers(5, &[4, 3], 7), 7, 5).unwrap();
        let x = random_batch(&mut ChaCha8Rng::seed_from_u64(0), 4, 5);
        let p = m.forward_with_taps(&x).unwrap();
        for v in p.probabilities().as_slice() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_dense_softmax() {
        let layers = vec![LayerSpec::dense(2, 2).tapped(), LayerSpec::softmax(2)];
        let mut m = ClassifierModel::with_zero_params(layers, 2, 2).unwrap();
        // W = I, b = (0.5, −0.5), x = (2, 1) → logits (2.5, 0.5).
        m.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap();
        let x = Matrix::from_rows(&[[2.0, 1.0]]).unwrap();
        let t = m.forward_with_taps(&x).unwrap();
        assert_eq!(t.logits().row(0), &[2.5, 0.5]);
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((t.probabilities()[(0, 0)] - p0).abs() < 1e-15);
        assert!((t.probabilities()[(0, 1)] - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn trace_shapes() {
        let m = ClassifierModel::default_mlp(0);
        let x = Matrix::zeros(5, 784);
        let t = m.forward_with_taps(&x).unwrap();
        assert_eq!(t.tap_count(), 3);
        let dims: Vec<(usize, usize)> = t.taps().iter().map(|z| z.shape()).collect();
        assert_eq!(dims, vec![(5, 512), (5, 256), (5, 128)]);
        assert!(matches!(m.forward_with_taps(&Matrix::zeros(2, 783)), Err(BidoError::Dimension(_))));
    }

    #[test]
    fn lenet_shapes() {
        let m = Architecture::Lenet.build(784, 10, 3).unwrap();
        let t = m.forward_with_taps(&Matrix::zeros(2, 784)).unwrap();
        assert_eq!(m.tap_dims(), vec![256, 120, 84]);
        assert_eq!(t.probabilities().shape(), (2, 10));
        assert!(Architecture::Lenet.build(256, 10, 3).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let y = one_hot(&[0], 3);
        let perfect = Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy(&perfect, &y).unwrap(), 0.0);
        let p = Matrix::from_rows(&[[0.7, 0.2, 0.1]]).unwrap();
        assert!((cross_entropy(&p, &y).unwrap() - 0.356675).abs() < 1e-6);
        let u = Matrix::from_fn(2, 10, |_, _| 0.1);
        let l = one_hot(&[3, 9], 10);
        assert!((cross_entropy(&u, &l).unwrap() - 10f64.ln()).abs() < 1e-12);
        let zero = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert!((cross_entropy(&zero, &y).unwrap() - (-PROBABILITY_FLOOR.ln())).abs() < 1e-12);
        let bad = Matrix::from_rows(&[[0.5, 0.5, 0.0]]).unwrap();
        assert!(matches!(cross_entropy(&p, &bad), Err(BidoError::Parameter(_))));
        let two = Matrix::from_rows(&[[1.0, 1.0, 0.0]]).unwrap();
        assert!(cross_entropy(&p, &two).is_err());
    }

    #[test]
    fn invalid_architectures() {
        let no_tap = vec![LayerSpec::dense(2, 2), LayerSpec::softmax(2)];
        assert!(ClassifierModel::new(no_tap, 2, 2, 0).is_err());
        let mismatch = vec![LayerSpec::dense(2, 3).tapped(), LayerSpec::softmax(2)];
        assert!(ClassifierModel::new(mismatch, 2, 2, 0).is_err());
        let early = vec![
            LayerSpec::softmax(2).tapped(),
            LayerSpec::dense(2, 2),
            LayerSpec::softmax(2),
        ];
        assert!(ClassifierModel::new(early, 2, 2, 0).is_err());
        let odd_pool = vec![
            LayerSpec::max_pool2(1, 3, 3).tapped(),
            LayerSpec::dense(1, 2),
            LayerSpec::softmax(2),
        ];
        assert!(ClassifierModel::new(odd_pool, 2, 9, 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = small_conv(1);
        let x = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 3, 36);
        let t = m.forward_with_taps(&x).unwrap();
        let g = m.backward(&t, &Upstream::default()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let zero = Upstream::probabilities(Matrix::zeros(3, 3));
        assert!(m.backward(&t, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    fn ce_param_check(model: &ClassifierModel, x: &Matrix, y: &Matrix) -> f64 {
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p.to_vec()).unwrap();
            cross_entropy(m.forward_with_taps(x).unwrap().probabilities(), y).unwrap()
        };
        let g = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p.to_vec()).unwrap();
            let t = m.forward_with_taps(x).unwrap();
            let (_, gl) = cross_entropy_with_gradient(t.probabilities(), y).unwrap();
            m.backward(&t, &Upstream::logits(gl)).unwrap()
        };
        finite_diff_check(f, g, model.params(), 1e-6, 1e-5)
            .unwrap()
            .max_relative_error
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..3 {
            let m = small_mlp(seed);
            let x = random_batch(&mut rng, 5, 3);
            let y = one_hot(&[0, 1, 1, 0, 1], 2);
            let e = ce_param_check(&m, &x, &y);
            assert!(e < 1e-5, "mlp seed {seed}: {e}");
            let c = small_conv(seed);
            let xc = random_batch(&mut rng, 4, 36);
            let yc = one_hot(&[0, 1, 2, 1], 3);
            let e = ce_param_check(&c, &xc, &yc);
            assert!(e < 1e-5, "conv seed {seed}: {e}");
        }
    }

    #[test]
    fn probability_route_matches_logit_route() {
        let m = small_conv(4);
        let x = random_batch(&mut ChaCha8Rng::seed_from_u64(4), 3, 36);
        let y = one_hot(&[2, 0, 1], 3);
        let t = m.forward_with_taps(&x).unwrap();
        let (_, gl) = cross_entropy_with_gradient(t.probabilities(), &y).unwrap();
        let gp = Matrix::from_fn(3, 3, |r, c| {
            if y[(r, c)] == 1.0 {
                -1.0 / (3.0 * t.probabilities()[(r, c)])
            } else {
                0.0
            }
        });
        let a = m.backward(&t, &Upstream::logits(gl)).unwrap();
        let b = m.backward(&t, &Upstream::probabilities(gp)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn tap_and_input_gradients_match_finite_differences() {
        // Objective: Σ c_j ⊙ Z_j over taps plus log p of class 1.
        let m = small_conv(9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_batch(&mut rng, 2, 36);
        let coef: Vec<Matrix> = m.tap_dims().iter().map(|&d| random_batch(&mut rng, 2, d)).collect();
        let objective = |m: &ClassifierModel, x: &Matrix| {
            let t = m.forward_with_taps(x).unwrap();
            let mut v = 0.0;
            for (z, c) in t.taps().iter().zip(&coef) {
                v += z.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            }
            v + log_softmax_rows(t.logits()).row_iter().map(|r| r[1]).sum::<f64>()
        };
        let upstream = |t: &ForwardTrace| {
            let p = t.probabilities();
            let mut gl = Matrix::from_fn(p.rows(), p.cols(), |_, c| if c == 1 { 1.0 } else { 0.0 });
            for (g, pv) in gl.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *g -= pv;
            }
            Upstream {
                logits: Some(gl),
                probabilities: None,
                taps: coef.iter().map(|c| Some(c.clone())).collect(),
            }
        };
        let report = finite_diff_check(
            |p| {
                let mut mm = m.clone();
                mm.set_params(p.to_vec()).unwrap();
                objective(&mm, &x)
            },
            |p| {
                let mut mm = m.clone();
                mm.set_params(p.to_vec()).unwrap();
                let t = mm.forward_with_taps(&x).unwrap();
                mm.backward(&t, &upstream(&t)).unwrap()
            },
            m.params(),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        let report = finite_diff_check(
            |v| objective(&m, &Matrix::from_vec(2, 36, v.to_vec()).unwrap()),
            |v| {
                let xx = Matrix::from_vec(2, 36, v.to_vec()).unwrap();
                let t = m.forward_with_taps(&xx).unwrap();
                m.input_gradient(&t, &upstream(&t)).unwrap().into_vec()
            },
            x.as_slice(),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn backward_rejects_bad_shapes() {
        let m = small_mlp(0);
        let t = m.forward_with_taps(&Matrix::zeros(3, 3)).unwrap();
        let bad = Upstream::logits(Matrix::zeros(2, 2));
        assert!(m.backward(&t, &bad).is_err());
        let bad_tap = Upstream {
            taps: vec![Some(Matrix::zeros(3, 5))],
            ..Default::default()
        };
        assert!(m.backward(&t, &bad_tap).is_err());
        let wrong_count = Upstream {
            taps: vec![None, None],
            ..Default::default()
        };
        assert!(m.backward(&t, &wrong_count).is_err());
    }

    #[test]
    fn gradient_step_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..5 {
            let m = small_conv(seed);
            let x = random_batch(&mut rng, 6, 36);
            let y = one_hot(&[0, 1, 2, 0, 1, 2], 3);
            let t = m.forward_with_taps(&x).unwrap();
            let (loss, gl) = cross_entropy_with_gradient(t.probabilities(), &y).unwrap();
            let g = m.backward(&t, &Upstream::logits(gl)).unwrap();
            let mut alpha = 1.0;
            let mut ok = false;
            for _ in 0..20 {
                let mut mm = m.clone();
                for (p, gv) in mm.params_mut().iter_mut().zip(&g) {
                    *p -= alpha * gv;
                }
                let l = cross_entropy(mm.forward_with_taps(&x).unwrap().probabilities(), &y).unwrap();
                if l <= loss {
                    ok = true;
                    break;
                }
                alpha /= 2.0;
            }
            assert!(ok);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = small_conv(3);
        m.params_mut()[0] = -0.0;
        m.params_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let meta = CheckpointMeta {
            seed: 3,
            config_hash: "abc".into(),
        };
        save_checkpoint(&m, &meta, &path).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.layers(), m.layers());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params()), bits(m.params()));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(BidoError::Format { .. })));
    }

    #[test]
    fn top_k_membership() {
        let row = [0.1, 0.5, 0.2, 0.2];
        assert!(in_top_k(&row, 1, 1));
        assert!(!in_top_k(&row, 3, 2));
        assert!(in_top_k(&row, 2, 2));
        assert!(in_top_k(&row, 0, 4));
        assert_eq!(argmax(&row), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_normalized_and_stable(seed in any::<u64>(), scale in 0.0f64..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Matrix::from_fn(3, 6, |_, _| rng.random_range(-scale..=scale));
            let p = softmax_rows(&logits);
            for row in p.row_iter() {
                prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>()) {
            let m = small_conv(seed);
            let x = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 3, 36);
            let a = m.forward_with_taps(&x).unwrap();
            let b = m.forward_with_taps(&x).unwrap();
            prop_assert_eq!(a.probabilities(), b.probabilities());
        }

        #[test]
        fn chunked_predict_matches_forward(seed in any::<u64>()) {
            let m = small_mlp(seed);
            let x = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), 300, 3);
            let full = m.forward_with_taps(&x).unwrap();
            prop_assert_eq!(full.probabilities(), &m.predict(&x).unwrap());
        }
    }
}
