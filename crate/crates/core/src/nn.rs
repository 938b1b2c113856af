//! A small deterministic neural-network engine: dense and 1-D convolutional
//! layers, average pooling, Swish, exact reverse-mode gradients and Adam.
//!
//! Activations are stored channels-last, so a tensor of shape `(len, channels)`
//! is the flat vector `x[pos * channels + chan]`. Flattening is a no-op.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Scaler};
use crate::stochastic::{domain, RngStream};

pub const MODEL_MAGIC: &[u8; 6] = b"FHNNN1";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Swish,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv1d { filters: usize, kernel: usize, stride: usize },
    AvgPool1d { size: usize, stride: usize },
    Flatten,
    Activation { kind: Activation },
}

impl LayerSpec {
    pub fn conv(filters: usize) -> Self {
        LayerSpec::Conv1d { filters, kernel: 3, stride: 2 }
    }

    pub fn pool() -> Self {
        LayerSpec::AvgPool1d { size: 2, stride: 2 }
    }

    pub fn swish() -> Self {
        LayerSpec::Activation { kind: Activation::Swish }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { units } => write!(f, "dense units={units}"),
            LayerSpec::Conv1d { filters, kernel, stride } => {
                write!(f, "conv1d filters={filters} kernel={kernel} stride={stride}")
            }
            LayerSpec::AvgPool1d { size, stride } => write!(f, "avgpool1d size={size} stride={stride}"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Activation { kind: Activation::Swish } => write!(f, "swish"),
            LayerSpec::Activation { kind: Activation::Identity } => write!(f, "identity"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        let mut words = s.split_whitespace();
        let name = words.next().ok_or_else(|| NnError::Format("empty layer line".into()))?;
        let mut get = |key: &str| -> Result<usize, NnError> {
            let word = words.next().ok_or_else(|| NnError::Format(format!("missing {key} in '{s}'")))?;
            word.strip_prefix(key)
                .and_then(|w| w.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| NnError::Format(format!("expected {key}=<n> in '{s}'")))
        };
        let layer = match name {
            "dense" => LayerSpec::Dense { units: get("units")? },
            "conv1d" => LayerSpec::Conv1d { filters: get("filters")?, kernel: get("kernel")?, stride: get("stride")? },
            "avgpool1d" => LayerSpec::AvgPool1d { size: get("size")?, stride: get("stride")? },
            "flatten" => LayerSpec::Flatten,
            "swish" => LayerSpec::swish(),
            "identity" => LayerSpec::Activation { kind: Activation::Identity },
            other => return Err(NnError::Format(format!("unknown layer '{other}'"))),
        };
        Ok(layer)
    }
}

/// Tensor shape `(len, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub len: usize,
    pub channels: usize,
}

impl Shape {
    pub fn size(self) -> usize {
        self.len * self.channels
    }
}

/// Output length of a window of width `k` sliding with step `s` over `len`.
pub fn window_out_len(len: usize, k: usize, s: usize) -> Option<usize> {
    (len >= k && k > 0 && s > 0).then(|| (len - k) / s + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_len: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub output_len: usize,
}

impl NetworkSpec {
    /// `hidden` blocks of `Dense{units}` + Swish, then a linear output layer.
    pub fn dense_family(input_len: usize, hidden: usize, units: usize, output_len: usize) -> Self {
        let mut layers = Vec::with_capacity(2 * hidden + 1);
        for _ in 0..hidden {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::swish());
        }
        layers.push(LayerSpec::Dense { units: output_len });
        NetworkSpec { input_len, input_channels: 1, layers, output_len }
    }

    /// `blocks` of Conv1d(`base_filters * 2^b`) + Swish + AvgPool, then
    /// Flatten, two `Dense{32}` + Swish and a linear output layer.
    pub fn cnn_family(input_len: usize, blocks: usize, base_filters: usize, output_len: usize) -> Self {
        let mut layers = Vec::with_capacity(3 * blocks + 6);
        for b in 0..blocks {
            layers.push(LayerSpec::conv(base_filters << b));
            layers.push(LayerSpec::swish());
            layers.push(LayerSpec::pool());
        }
        layers.push(LayerSpec::Flatten);
        for _ in 0..2 {
            layers.push(LayerSpec::Dense { units: 32 });
            layers.push(LayerSpec::swish());
        }
        layers.push(LayerSpec::Dense { units: output_len });
        NetworkSpec { input_len, input_channels: 1, layers, output_len }
    }

    pub fn input_size(&self) -> usize {
        self.input_len * self.input_channels
    }

    /// Shapes before the first layer and after every layer.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let mut shape = Shape { len: self.input_len, channels: self.input_channels };
        if shape.size() == 0 {
            return Err(NnError::Shape("empty input".into()));
        }
        let mut out = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { units } if units > 0 => Shape { len: 1, channels: units },
                LayerSpec::Conv1d { filters, kernel, stride } if filters > 0 => {
                    let len = window_out_len(shape.len, kernel, stride).ok_or_else(|| {
                        NnError::Shape(format!("layer {i} ({layer}) cannot apply to length {}", shape.len))
                    })?;
                    Shape { len, channels: filters }
                }
                LayerSpec::AvgPool1d { size, stride } => {
                    let len = window_out_len(shape.len, size, stride).ok_or_else(|| {
                        NnError::Shape(format!("layer {i} ({layer}) cannot apply to length {}", shape.len))
                    })?;
                    Shape { len, channels: shape.channels }
                }
                LayerSpec::Flatten => Shape { len: 1, channels: shape.size() },
                LayerSpec::Activation { .. } => shape,
                _ => return Err(NnError::Shape(format!("layer {i} ({layer}) has zero width"))),
            };
            out.push(shape);
        }
        let last = *out.last().expect("input shape");
        if last.size() != self.output_len {
            return Err(NnError::Shape(format!("network emits {} values, expected {}", last.size(), self.output_len)));
        }
        Ok(out)
    }

    /// Canonical text form used in model files.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input_len={}\ninput_channels={}\noutput_len={}\n",
            self.input_len, self.input_channels, self.output_len
        );
        for layer in &self.layers {
            s.push_str(&format!("layer {layer}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<usize, NnError> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| NnError::Format(format!("missing {key}")))
        };
        let input_len = header("input_len")?;
        let input_channels = header("input_channels")?;
        let output_len = header("output_len")?;
        let layers = lines
            .map(|l| {
                l.strip_prefix("layer ")
                    .ok_or_else(|| NnError::Format(format!("unexpected line '{l}'")))
                    .and_then(str::parse)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NetworkSpec { input_len, input_channels, layers, output_len })
    }
}

/// Weight and bias counts of one layer applied to `input`.
fn layer_param_counts(layer: &LayerSpec, input: Shape) -> (usize, usize) {
    match *layer {
        LayerSpec::Dense { units } => (input.size() * units, units),
        LayerSpec::Conv1d { filters, kernel, .. } => (kernel * input.channels * filters, filters),
        _ => (0, 0),
    }
}

pub fn param_count(spec: &NetworkSpec) -> Result<usize, NnError> {
    let shapes = spec.shapes()?;
    Ok(spec
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, &s)| {
            let (w, b) = layer_param_counts(l, s);
            w + b
        })
        .sum())
}

/// Location of one layer's weights and biases in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub weights: usize,
    pub biases: usize,
}

impl ParamSlot {
    fn weight_range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weights
    }

    fn bias_range(self) -> std::ops::Range<usize> {
        self.offset + self.weights..self.offset + self.weights + self.biases
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
    layout: Vec<ParamSlot>,
    shapes: Vec<Shape>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Glorot-uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Network {
    /// A network with all parameters zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self, NnError> {
        let shapes = spec.shapes()?;
        let mut layout = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for (layer, &shape) in spec.layers.iter().zip(&shapes) {
            let (weights, biases) = layer_param_counts(layer, shape);
            layout.push(ParamSlot { offset, weights, biases });
            offset += weights + biases;
        }
        Ok(Network { spec, params: vec![0.0; offset], layout, shapes })
    }

    /// Glorot-uniform weights and zero biases; layer `i` draws from stream
    /// `WEIGHT_INIT + i` of `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        let mut net = Network::zeros(spec)?;
        for (i, layer) in net.spec.layers.iter().enumerate() {
            let input = net.shapes[i];
            let (fan_in, fan_out) = match *layer {
                LayerSpec::Dense { units } => (input.size(), units),
                LayerSpec::Conv1d { filters, kernel, .. } => (kernel * input.channels, kernel * filters),
                _ => continue,
            };
            let limit = glorot_limit(fan_in, fan_out);
            let mut rng = RngStream::new(seed, domain::WEIGHT_INIT + i as u64).rng();
            for w in &mut net.params[net.layout[i].weight_range()] {
                *w = rng.uniform(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn with_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Network::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape(format!(
                "parameter vector has {} entries, spec needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.params[self.layout[layer].weight_range()]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout[layer].weight_range();
        &mut self.params[r]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout[layer].bias_range();
        &mut self.params[r]
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            acts: self.shapes.iter().map(|s| vec![0.0; s.size()]).collect(),
            aux: self
                .spec
                .layers
                .iter()
                .zip(&self.shapes[1..])
                .map(|(l, s)| match l {
                    LayerSpec::Activation { kind: Activation::Swish } => vec![0.0; s.size()],
                    _ => Vec::new(),
                })
                .collect(),
            delta: vec![0.0; self.shapes.iter().map(|s| s.size()).max().unwrap_or(0)],
            delta_prev: vec![0.0; self.shapes.iter().map(|s| s.size()).max().unwrap_or(0)],
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NnError> {
        if input.len() != self.spec.input_size() {
            return Err(NnError::Shape(format!("input has length {}, expected {}", input.len(), self.spec.input_size())));
        }
        Ok(())
    }

    /// Runs the network, leaving every activation in `ws`; returns the output.
    pub fn forward_ws<'w>(&self, input: &[f64], ws: &'w mut Workspace) -> Result<&'w [f64], NnError> {
        self.check_input(input)?;
        ws.acts[0].copy_from_slice(input);
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let (done, rest) = ws.acts.split_at_mut(i + 1);
            let x = &done[i];
            let y = &mut rest[0];
            let slot = self.layout[i];
            let (inp, out) = (self.shapes[i], self.shapes[i + 1]);
            match *layer {
                LayerSpec::Dense { .. } => {
                    affine(x, &self.params[slot.weight_range()], &self.params[slot.bias_range()], y);
                }
                LayerSpec::Conv1d { filters, kernel, stride } => {
                    let w = &self.params[slot.weight_range()];
                    let b = &self.params[slot.bias_range()];
                    let width = kernel * inp.channels;
                    for p in 0..out.len {
                        let start = p * stride * inp.channels;
                        affine(&x[start..start + width], w, b, &mut y[p * filters..(p + 1) * filters]);
                    }
                }
                LayerSpec::AvgPool1d { size, stride } => {
                    let c = inp.channels;
                    let scale = 1.0 / size as f64;
                    for p in 0..out.len {
                        let yp = &mut y[p * c..(p + 1) * c];
                        yp.copy_from_slice(&x[p * stride * c..(p * stride + 1) * c]);
                        for j in 1..size {
                            let xs = &x[(p * stride + j) * c..(p * stride + j + 1) * c];
                            yp.iter_mut().zip(xs).for_each(|(a, b)| *a += b);
                        }
                        yp.iter_mut().for_each(|a| *a *= scale);
                    }
                }
                LayerSpec::Flatten | LayerSpec::Activation { kind: Activation::Identity } => y.copy_from_slice(x),
                LayerSpec::Activation { kind: Activation::Swish } => {
                    let sig = &mut ws.aux[i];
                    for ((yv, s), &xv) in y.iter_mut().zip(sig.iter_mut()).zip(x) {
                        *s = sigmoid(xv);
                        *yv = xv * *s;
                    }
                }
            }
        }
        Ok(ws.acts.last().expect("output activation"))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut ws = self.workspace();
        Ok(self.forward_ws(input, &mut ws)?.to_vec())
    }

    /// Adds `d loss / d params` for one sample to `grad`, where `out_grad` is
    /// `d loss / d output` and `ws` holds the activations of the forward pass.
    pub fn backward_ws(&self, out_grad: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
        let n_layers = self.spec.layers.len();
        let out_size = self.shapes[n_layers].size();
        ws.delta[..out_size].copy_from_slice(out_grad);
        for i in (0..n_layers).rev() {
            let (inp, out) = (self.shapes[i], self.shapes[i + 1]);
            let x = &ws.acts[i];
            let dy = &ws.delta[..out.size()];
            let need_dx = i > 0;
            let dx = &mut ws.delta_prev[..inp.size()];
            let slot = self.layout[i];
            match self.spec.layers[i] {
                LayerSpec::Dense { .. } => {
                    let (gw, gb) = grad[slot.offset..slot.offset + slot.weights + slot.biases].split_at_mut(slot.weights);
                    affine_backward(x, &self.params[slot.weight_range()], dy, gw, gb, need_dx.then_some(dx));
                }
                LayerSpec::Conv1d { filters, kernel, stride } => {
                    let w = &self.params[slot.weight_range()];
                    let (gw, gb) = grad[slot.offset..slot.offset + slot.weights + slot.biases].split_at_mut(slot.weights);
                    let width = kernel * inp.channels;
                    if need_dx {
                        dx.fill(0.0);
                    }
                    for p in 0..out.len {
                        let start = p * stride * inp.channels;
                        let dyp = &dy[p * filters..(p + 1) * filters];
                        let dxp = need_dx.then(|| &mut dx[start..start + width]);
                        conv_window_backward(&x[start..start + width], w, dyp, gw, gb, dxp);
                    }
                }
                LayerSpec::AvgPool1d { size, stride } => {
                    if need_dx {
                        let c = inp.channels;
                        let scale = 1.0 / size as f64;
                        dx.fill(0.0);
                        for p in 0..out.len {
                            let dyp = &dy[p * c..(p + 1) * c];
                            for j in 0..size {
                                let dxs = &mut dx[(p * stride + j) * c..(p * stride + j + 1) * c];
                                dxs.iter_mut().zip(dyp).for_each(|(a, b)| *a += b * scale);
                            }
                        }
                    }
                }
                LayerSpec::Flatten | LayerSpec::Activation { kind: Activation::Identity } => {
                    if need_dx {
                        dx.copy_from_slice(dy);
                    }
                }
                LayerSpec::Activation { kind: Activation::Swish } => {
                    if need_dx {
                        let sig = &ws.aux[i];
                        let y = &ws.acts[i + 1];
                        for (((d, &g), &s), &yv) in dx.iter_mut().zip(dy).zip(sig).zip(y) {
                            *d = g * (s + yv * (1.0 - s));
                        }
                    }
                }
            }
            if need_dx {
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
    }

    /// Mean squared error over output coordinates for one sample, and the
    /// gradient of that loss scaled by `weight` added into `grad`.
    pub fn loss_and_grad(
        &self,
        input: &[f64],
        target: &[f64],
        weight: f64,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<f64, NnError> {
        if target.len() != self.spec.output_len {
            return Err(NnError::Shape(format!("target has length {}, expected {}", target.len(), self.spec.output_len)));
        }
        let out = self.forward_ws(input, ws)?;
        let m = out.len() as f64;
        let mut loss = 0.0;
        let mut og = [0.0; 8];
        let mut og_vec;
        let og: &mut [f64] = if out.len() <= og.len() {
            &mut og[..out.len()]
        } else {
            og_vec = vec![0.0; out.len()];
            &mut og_vec
        };
        for ((g, &y), &t) in og.iter_mut().zip(out).zip(target) {
            let r = y - t;
            loss += r * r;
            *g = 2.0 * r * weight / m;
        }
        self.backward_ws(og, ws, grad);
        Ok(loss / m)
    }

    /// Batch-mean loss and its exact gradient.
    pub fn backward(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<(f64, Vec<f64>), NnError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(NnError::Shape("batch must be non-empty with one target per input".into()));
        }
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.params.len()];
        let w = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            loss += self.loss_and_grad(x, t, w, &mut ws, &mut grad)?;
        }
        Ok((loss * w, grad))
    }

    pub fn mean_loss(&self, dataset: &Dataset) -> Result<f64, NnError> {
        let mut ws = self.workspace();
        let mut total = 0.0;
        for s in &dataset.samples {
            if s.target.len() != self.spec.output_len {
                return Err(NnError::Shape("dataset target length differs from network output".into()));
            }
            let out = self.forward_ws(&s.features, &mut ws)?;
            total += out.iter().zip(&s.target).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / out.len() as f64;
        }
        Ok(total / dataset.len().max(1) as f64)
    }

    /// Predictions for every sample, in the dataset's units.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>, NnError> {
        let mut ws = self.workspace();
        dataset.samples.iter().map(|s| Ok(self.forward_ws(&s.features, &mut ws)?.to_vec())).collect()
    }
}

/// Per-layer buffers reused across forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    aux: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// `y = b + x W` with `W` stored `[in][out]`.
fn affine(x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let m = b.len();
    y.copy_from_slice(b);
    for (&xi, row) in x.iter().zip(w.chunks_exact(m)) {
        for (yo, &wv) in y.iter_mut().zip(row) {
            *yo += xi * wv;
        }
    }
}

fn affine_backward(x: &[f64], w: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
    let m = dy.len();
    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
    for (&xi, grow) in x.iter().zip(gw.chunks_exact_mut(m)) {
        for (g, &d) in grow.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (d, row) in dx.iter_mut().zip(w.chunks_exact(m)) {
            *d = row.iter().zip(dy).map(|(a, b)| a * b).sum();
        }
    }
}

/// Like [`affine_backward`] but accumulates into `dx`, since windows overlap.
fn conv_window_backward(x: &[f64], w: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
    let m = dy.len();
    gb.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
    for (&xi, grow) in x.iter().zip(gw.chunks_exact_mut(m)) {
        for (g, &d) in grow.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    if let Some(dx) = dx {
        for (d, row) in dx.iter_mut().zip(w.chunks_exact(m)) {
            *d += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState { step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params], lr, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, batch_size: 32, lr: 0.002, shuffle_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss seen while updating during the epoch.
    pub train_loss: f64,
    /// Mean loss on the validation set after the epoch.
    pub valid_loss: f64,
}

pub fn write_history_csv(w: &mut impl Write, history: &[EpochRecord]) -> io::Result<()> {
    writeln!(w, "epoch,train_loss,valid_loss")?;
    for r in history {
        writeln!(w, "{},{:?},{:?}", r.epoch, r.train_loss, r.valid_loss)?;
    }
    Ok(())
}

/// Mini-batch Adam on the batch-mean loss. Each epoch visits the training set
/// in a permutation drawn from stream `SHUFFLE + epoch` of `shuffle_seed`; the
/// last batch may be smaller. Returns the final-epoch network.
pub fn train(
    mut net: Network,
    train_set: &Dataset,
    valid_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochRecord>), NnError> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(NnError::Config("batch size and learning rate must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(NnError::Config("empty training set".into()));
    }
    for ds in std::iter::once(train_set).chain(valid_set) {
        if ds.feature_len() != net.spec.input_size() || ds.target_len() != net.spec.output_len {
            return Err(NnError::Shape(format!(
                "dataset shape ({}, {}) does not fit network ({}, {})",
                ds.feature_len(),
                ds.target_len(),
                net.spec.input_size(),
                net.spec.output_len
            )));
        }
    }
    let mut adam = AdamState::new(net.params.len(), cfg.lr);
    let mut ws = net.workspace();
    let mut grad = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        RngStream::new(cfg.shuffle_seed, domain::SHUFFLE + epoch as u64).rng().shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train_set.samples[i];
                batch_loss += net.loss_and_grad(&s.features, &s.target, w, &mut ws, &mut grad)?;
            }
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            adam.step(&mut net.params, &grad);
        }
        let valid_loss = match valid_set {
            Some(v) => net.mean_loss(v)?,
            None => f64::NAN,
        };
        history.push(EpochRecord { epoch: epoch + 1, train_loss: epoch_loss / train_set.len() as f64, valid_loss });
    }
    Ok((net, history))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    xs.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))
}

/// Model file: magic, header length, canonical spec text, parameter count and
/// parameters, then an optional scaler (flag byte, four length-prefixed vectors).
pub fn write_model(w: &mut impl Write, net: &Network, scaler: Option<&Scaler>) -> Result<(), NnError> {
    let text = net.spec.to_text();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(net.params.len() as u64).to_le_bytes())?;
    write_f64s(w, &net.params)?;
    match scaler {
        Some(sc) => {
            w.write_all(&[1])?;
            for v in [&sc.feature_mean, &sc.feature_sd, &sc.target_mean, &sc.target_sd] {
                w.write_all(&(v.len() as u64).to_le_bytes())?;
                write_f64s(w, v)?;
            }
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<(Network, Option<Scaler>), NnError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let text_len = read_u64(r)? as usize;
    if text_len > 1 << 20 {
        return Err(NnError::Format("implausible header length".into()));
    }
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| NnError::Format("header is not UTF-8".into()))?;
    let spec = NetworkSpec::from_text(&text)?;
    let expected = param_count(&spec)?;
    let n = read_u64(r)? as usize;
    if n != expected {
        return Err(NnError::Format(format!("file holds {n} parameters, spec needs {expected}")));
    }
    let params = read_f64s(r, n)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let scaler = match flag[0] {
        0 => None,
        1 => {
            let mut vecs = Vec::with_capacity(4);
            for _ in 0..4 {
                let len = read_u64(r)? as usize;
                if len > 1 << 24 {
                    return Err(NnError::Format("implausible scaler length".into()));
                }
                vecs.push(read_f64s(r, len)?);
            }
            let target_sd = vecs.pop().expect("four vectors");
            let target_mean = vecs.pop().expect("four vectors");
            let feature_sd = vecs.pop().expect("four vectors");
            let feature_mean = vecs.pop().expect("four vectors");
            Some(Scaler { feature_mean, feature_sd, target_mean, target_sd })
        }
        b => return Err(NnError::Format(format!("bad scaler flag {b}"))),
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Format("trailing bytes after model".into()));
    }
    Ok((Network::with_params(spec, params)?, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_param_count_minimum() {
        assert_eq!(param_count(&NetworkSpec::dense_family(1000, 2, 4, 2)).unwrap(), 4034);
        let single = NetworkSpec { input_len: 1, input_channels: 1, layers: vec![LayerSpec::Dense { units: 1 }], output_len: 1 };
        assert_eq!(param_count(&single).unwrap(), 2);
    }

    #[test]
    fn cnn_param_count_by_hand() {
        // conv 1->8, 8->16, 16->32 with k=3; flatten 15x32; dense 32, 32, 2.
        let conv = (8 * 3 + 8) + (16 * 3 * 8 + 16) + (32 * 3 * 16 + 32);
        let dense = (480 * 32 + 32) + (32 * 32 + 32) + (32 * 2 + 2);
        let spec = NetworkSpec::cnn_family(1000, 3, 8, 2);
        assert_eq!(param_count(&spec).unwrap(), conv + dense);
        assert_eq!(Network::zeros(spec).unwrap().params.len(), conv + dense);
    }

    #[test]
    fn cnn_shape_chain() {
        let spec = NetworkSpec::cnn_family(1000, 3, 8, 2);
        let lens: Vec<usize> = spec.shapes().unwrap().iter().step_by(3).take(4).map(|s| s.len).collect();
        assert_eq!(lens, vec![1000, 249, 62, 15]);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1].len, 499);
        assert_eq!(shapes[4].len, 124);
        assert_eq!(shapes[7].len, 30);
        assert!(NetworkSpec::cnn_family(20, 4, 2, 2).shapes().is_err());
    }

    #[test]
    fn swish_values() {
        assert_eq!(swish(0.0), 0.0);
        assert!((swish(20.0) - 20.0).abs() < 1e-7);
        for i in 0..=100 {
            let x = -5.0 + 0.1 * i as f64;
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_derivative(x)).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(NetworkSpec::cnn_family(64, 2, 2, 2)).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        assert_eq!(net.forward(&x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn selector_kernel_and_pooling() {
        let spec = NetworkSpec { input_len: 5, input_channels: 1, layers: vec![LayerSpec::conv(1)], output_len: 2 };
        let mut net = Network::zeros(spec).unwrap();
        net.weights_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![1.0, 3.0]);

        let spec = NetworkSpec { input_len: 4, input_channels: 1, layers: vec![LayerSpec::pool()], output_len: 2 };
        let net = Network::zeros(spec).unwrap();
        assert_eq!(net.forward(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn input_length_is_checked() {
        let net = Network::zeros(NetworkSpec::dense_family(8, 1, 4, 2)).unwrap();
        assert!(matches!(net.forward(&[0.0; 7]), Err(NnError::Shape(_))));
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let net = Network::init(NetworkSpec::dense_family(8, 2, 4, 2), 3).unwrap();
        let x: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let y = net.forward(&x).unwrap();
        let (loss, grad) = net.backward(&[&x], &[&y]).unwrap();
        assert_eq!(loss, 0.0);
        let last = net.layout().len() - 1;
        let slot = net.layout()[last];
        assert!(grad[slot.offset + slot.weights..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn output_layer_scaling() {
        let mut net = Network::init(NetworkSpec::dense_family(8, 2, 4, 2), 5).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let last = net.layout().len() - 1;
        net.biases_mut(last).fill(0.0);
        let y = net.forward(&x).unwrap();
        net.weights_mut(last).iter_mut().for_each(|w| *w *= 2.5);
        let z = net.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&z) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = NetworkSpec::cnn_family(100, 2, 4, 2);
        let a = Network::init(spec.clone(), 11).unwrap();
        let b = Network::init(spec.clone(), 11).unwrap();
        let c = Network::init(spec, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        for (i, layer) in a.spec.layers.iter().enumerate() {
            let input = a.shapes()[i];
            let limit = match *layer {
                LayerSpec::Dense { units } => glorot_limit(input.size(), units),
                LayerSpec::Conv1d { filters, kernel, .. } => glorot_limit(kernel * input.channels, kernel * filters),
                _ => continue,
            };
            assert!(a.weights(i).iter().all(|w| w.abs() <= limit));
            let slot = a.layout()[i];
            assert!(a.params[slot.bias_range()].iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let mut adam = AdamState::new(3, 0.002);
        adam.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut p = vec![0.0; 4];
        let g = [3.0, -0.5, 1e-2, -200.0];
        let mut adam = AdamState::new(4, 0.002);
        adam.step(&mut p, &g);
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + 0.002 * gi.signum()).abs() < 1e-3 * 0.002);
        }
    }

    #[test]
    fn adam_matches_scalar_oracle_on_quadratic() {
        // Hand-rolled scalar Adam on f(p) = p^2 / 2.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-7);
        let (mut p, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            expected.push(p);
        }
        let mut params = vec![1.5];
        let mut adam = AdamState::new(1, 0.1);
        for e in expected {
            let g = params[0];
            adam.step(&mut params, &[g]);
            assert!((params[0] - e).abs() < 1e-12);
        }
        assert_eq!(adam.step, 10);
    }

    #[test]
    fn spec_text_round_trip() {
        for spec in [NetworkSpec::dense_family(1000, 4, 32, 2), NetworkSpec::cnn_family(1501, 3, 8, 4)] {
            assert_eq!(NetworkSpec::from_text(&spec.to_text()).unwrap(), spec);
        }
        assert!(NetworkSpec::from_text("input_len=3\n").is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let net = Network::init(NetworkSpec::cnn_family(64, 2, 2, 2), 1).unwrap();
        let scaler = Scaler { feature_mean: vec![0.5; 64], feature_sd: vec![2.0; 64], target_mean: vec![0.1, 0.2], target_sd: vec![1.0, 3.0] };
        for sc in [None, Some(&scaler)] {
            let mut buf = Vec::new();
            write_model(&mut buf, &net, sc).unwrap();
            let (back, back_sc) = read_model(&mut buf.as_slice()).unwrap();
            assert_eq!(back, net);
            assert_eq!(back_sc.as_ref(), sc);
            assert!(read_model(&mut &buf[..buf.len() - 1]).is_err());
        }
    }
}
