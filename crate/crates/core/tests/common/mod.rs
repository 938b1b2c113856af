//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use fhn_core::fhn::{fhn_rhs, SimConstants, State, ThetaPair};
use fhn_core::nn::{LayerSpec, Network, NetworkSpec};
use fhn_core::stochastic::{RngStream, StreamRng};

/// Classical fixed-step RK4 sampled every `dt_out`; `h` must divide `dt_out`.
pub fn rk4_series(theta: ThetaPair, c: &SimConstants, h: f64) -> Vec<f64> {
    let n = c.n_steps().unwrap();
    let per = (c.dt_out / h).round() as usize;
    let mut y = State::new(c.u0, c.v0);
    let mut out = Vec::with_capacity(n);
    let shift = |y: State, k: State, a: f64| State::new(y.u + a * k.u, y.v + a * k.v);
    for _ in 0..n {
        for _ in 0..per {
            let k1 = fhn_rhs(y, theta, c);
            let k2 = fhn_rhs(shift(y, k1, 0.5 * h), theta, c);
            let k3 = fhn_rhs(shift(y, k2, 0.5 * h), theta, c);
            let k4 = fhn_rhs(shift(y, k3, h), theta, c);
            y = State::new(
                y.u + h / 6.0 * (k1.u + 2.0 * k2.u + 2.0 * k3.u + k4.u),
                y.v + h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
            );
        }
        out.push(y.u);
    }
    out
}

/// Batch-mean squared error computed from `forward` only.
pub fn batch_loss(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let y = net.forward(x).unwrap();
        total += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    total / inputs.len() as f64
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, measured per parameter block (each layer's
/// weights and biases) as `max|a - n| / max|n|` over the block.
pub fn max_grad_rel_error(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>], h: f64) -> f64 {
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let ts: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let (_, analytic) = net.backward(&xs, &ts).unwrap();
    let mut probe = net.clone();
    let numeric: Vec<f64> = (0..analytic.len())
        .map(|i| {
            let p = net.params[i];
            probe.params[i] = p + h;
            let up = batch_loss(&probe, inputs, targets);
            probe.params[i] = p - h;
            let down = batch_loss(&probe, inputs, targets);
            probe.params[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect();
    let mut worst = 0.0f64;
    for slot in net.layout() {
        let w = slot.offset..slot.offset + slot.weights;
        let b = w.end..w.end + slot.biases;
        for r in [w, b] {
            if r.is_empty() {
                continue;
            }
            let diff = r.clone().map(|i| (analytic[i] - numeric[i]).abs()).fold(0.0, f64::max);
            let scale = r.map(|i| numeric[i].abs()).fold(0.0, f64::max);
            worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
        }
    }
    worst
}

/// A Glorot-initialized network with biases uniform in `[-0.5, 0.5]`, plus a
/// random batch with inputs and targets uniform in `[-1, 1]`.
pub fn random_instance(spec: NetworkSpec, seed: u64, batch: usize) -> (Network, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng: StreamRng = RngStream::new(seed, 0xfeed).rng();
    let mut net = Network::init(spec, seed).unwrap();
    for slot in net.layout().to_vec() {
        for b in &mut net.params[slot.offset + slot.weights..slot.offset + slot.weights + slot.biases] {
            *b = rng.uniform(-0.5, 0.5);
        }
    }
    let n_in = net.spec.input_size();
    let n_out = net.spec.output_len;
    let inputs = (0..batch).map(|_| (0..n_in).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let targets = (0..batch).map(|_| (0..n_out).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    (net, inputs, targets)
}

/// Small networks that isolate one layer type between a shape-preserving 1x1
/// convolution (so the layer's input gradient is exercised) and a dense read-out.
pub fn layer_probe_spec(kind: &str, variant: u64) -> NetworkSpec {
    let v = variant as usize;
    let (input_len, input_channels, mut layers) = match kind {
        "dense" => (5 + v % 4, 1, vec![LayerSpec::Dense { units: 2 + v % 3 }]),
        "conv1d" => (
            9 + v,
            1 + v % 3,
            vec![LayerSpec::Conv1d { filters: 1 + v % 4, kernel: 1 + v % 4, stride: 1 + v % 3 }],
        ),
        "avgpool1d" => (8 + v, 1 + v % 2, vec![LayerSpec::AvgPool1d { size: 1 + v % 3, stride: 1 + v % 2 }]),
        "swish" => (4 + v % 5, 1 + v % 2, vec![LayerSpec::swish()]),
        "identity" => (4 + v % 5, 1, vec![LayerSpec::Activation { kind: fhn_core::nn::Activation::Identity }]),
        "flatten" => (3 + v % 4, 2, vec![LayerSpec::Flatten]),
        other => panic!("unknown layer kind {other}"),
    };
    layers.insert(0, LayerSpec::Conv1d { filters: input_channels, kernel: 1, stride: 1 });
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: 2 });
    NetworkSpec { input_len, input_channels, layers, output_len: 2 }
}

pub const LAYER_KINDS: [&str; 6] = ["dense", "conv1d", "avgpool1d", "swish", "identity", "flatten"];
