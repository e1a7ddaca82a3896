#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use splitgp_core::data::{LabeledDataset, Sample};
use splitgp_core::nn::{Activation, Layer, LayeredModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

/// Dense layers of the given widths with relu after every dense layer
/// except, when `relu_last` is false, the final one.
pub fn random_segment(rng: &mut ChaCha8Rng, dims: &[usize], relu_last: bool) -> LayeredModel {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let scale = 1.0 / (a as f64).sqrt();
        let weight = (0..a * b).map(|_| normal(rng, scale)).collect();
        let bias = (0..b).map(|_| normal(rng, 0.1)).collect();
        layers.push(Layer::dense(a, b, weight, bias).unwrap());
        if relu_last || i + 2 < dims.len() {
            layers.push(Layer::relu(b));
        }
    }
    LayeredModel::new(layers).unwrap()
}

/// A random two-exit network `(phi, head, theta)` with 2 to 4 dense layers
/// on each path and every width at most 16.
pub fn random_two_exit(rng: &mut ChaCha8Rng) -> (LayeredModel, LayeredModel, LayeredModel, usize) {
    let input = rng.random_range(2..=8);
    let classes = rng.random_range(2..=6);
    let phi_layers = rng.random_range(1..=2);
    let mut phi_dims = vec![input];
    for _ in 0..phi_layers {
        phi_dims.push(rng.random_range(2..=16));
    }
    let cut = *phi_dims.last().unwrap();
    let mut head_dims = vec![cut];
    for _ in 0..rng.random_range(0..=1) {
        head_dims.push(rng.random_range(2..=16));
    }
    head_dims.push(classes);
    let mut theta_dims = vec![cut];
    for _ in 0..rng.random_range(0..=2) {
        theta_dims.push(rng.random_range(2..=16));
    }
    theta_dims.push(classes);
    (
        random_segment(rng, &phi_dims, true),
        random_segment(rng, &head_dims, false),
        random_segment(rng, &theta_dims, false),
        classes,
    )
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample::new((0..dim).map(|_| normal(rng, 1.0)).collect(), rng.random_range(0..classes)))
        .collect()
}

/// Small Gaussian-blob client datasets, each holding two classes.
pub fn blob_clients(seed: u64, clients: usize, per_client: usize, dim: usize, classes: usize) -> Vec<LabeledDataset> {
    let mut r = rng(seed);
    let means: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| normal(&mut r, 2.0)).collect()).collect();
    (0..clients)
        .map(|k| {
            let samples = (0..per_client)
                .map(|i| {
                    let label = (2 * k + i % 2) % classes;
                    let x = means[label].iter().map(|m| m + normal(&mut r, 1.0)).collect();
                    Sample::new(x, label)
                })
                .collect();
            LabeledDataset::new(classes, dim, samples).unwrap()
        })
        .collect()
}

/// Relative error with a small floor so that entries near zero are compared
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Two-exit objective evaluated with forward passes only.
pub fn objective(phi: &LayeredModel, head: &LayeredModel, theta: &LayeredModel, batch: &[Sample], gamma: f64) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|s| {
            let z = phi.forward(&s.features).unwrap();
            let (lc, _) = splitgp_core::nn::softmax_cross_entropy(&head.forward(&z).unwrap(), s.label).unwrap();
            let (ls, _) = splitgp_core::nn::softmax_cross_entropy(&theta.forward(&z).unwrap(), s.label).unwrap();
            gamma * lc + (1.0 - gamma) * ls
        })
        .sum::<f64>()
        / n
}

/// Signs of every relu input of `model` on `x`.
pub fn relu_signs(model: &LayeredModel, x: &[f64], out: &mut Vec<bool>) -> Vec<f64> {
    let trace = model.forward_trace(x).unwrap();
    for (layer, input) in model.layers().iter().zip(&trace) {
        if let Layer::Activation { function: Activation::Relu, .. } = layer {
            out.extend(input.iter().map(|v| *v > 0.0));
        }
    }
    trace.last().unwrap().clone()
}

/// Relu activation pattern of a two-exit network over a batch.
pub fn two_exit_pattern(segs: &[LayeredModel; 3], batch: &[Sample]) -> Vec<bool> {
    let mut out = Vec::new();
    for s in batch {
        let z = relu_signs(&segs[0], &s.features, &mut out);
        relu_signs(&segs[1], &z, &mut out);
        relu_signs(&segs[2], &z, &mut out);
    }
    out
}

/// Fourth-order central differences of `f` with respect to every parameter
/// of segment `which` (0 = phi, 1 = head, 2 = theta), in block order.
///
/// Relu kinks make `f` non-differentiable; when `pattern` changes anywhere
/// inside the stencil the step is shrunk until it no longer does.
pub fn finite_differences(
    segs: &[LayeredModel; 3],
    which: usize,
    h: f64,
    f: &dyn Fn(&[LayeredModel; 3]) -> f64,
    pattern: &dyn Fn(&[LayeredModel; 3]) -> Vec<bool>,
) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = segs[which].param_blocks().map(|b| b.len()).collect();
    let base = pattern(segs);
    let shifted = |bi: usize, j: usize, delta: f64| {
        let mut s = segs.clone();
        s[which].param_blocks_mut().nth(bi).unwrap()[j] += delta;
        s
    };
    let mut out = Vec::new();
    for (bi, len) in shapes.into_iter().enumerate() {
        let block = (0..len)
            .map(|j| {
                let mut step = h;
                while step > h * 1e-4 && [-2.0, -1.0, 1.0, 2.0].iter().any(|k| pattern(&shifted(bi, j, k * step)) != base) {
                    step /= 4.0;
                }
                let at = |k: f64| f(&shifted(bi, j, k * step));
                (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * step)
            })
            .collect();
        out.push(block);
    }
    out
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

/// Random latency operating point covering every sign pattern of the rate
/// threshold (including `q < beta * q_c`).
pub fn random_latency(rng: &mut ChaCha8Rng) -> splitgp_core::latency::LatencyParams {
    splitgp_core::latency::LatencyParams {
        client_rate: log_uniform(rng, 0.1, 1e4),
        server_rate: log_uniform(rng, 1.0, 1e5),
        uplink_rate: log_uniform(rng, 0.01, 1e3),
        input_dim: log_uniform(rng, 1.0, 5e3),
        cut_dim: log_uniform(rng, 1.0, 5e3),
        beta: rng.random_range(0.0..1.0),
        phi_size: log_uniform(rng, 1e2, 1e7),
        head_size: log_uniform(rng, 1e2, 1e7),
        theta_size: log_uniform(rng, 1e2, 1e7),
        samples: log_uniform(rng, 1.0, 100.0),
        budget: 0.0,
    }
}

/// Whether the client-rate threshold verdict agrees with comparing τ and τ₁.
pub fn client_rate_verdict_agrees(p: &splitgp_core::latency::LatencyParams) -> bool {
    use splitgp_core::latency::{pc_threshold, tau_client_full, tau_splitgp};
    pc_threshold(p).admits(p.client_rate) == (tau_splitgp(p) <= tau_client_full(p))
}

/// Whether the exact uplink-rate threshold verdict agrees with comparing τ and τ₂.
pub fn uplink_rate_verdict_agrees(p: &splitgp_core::latency::LatencyParams) -> bool {
    use splitgp_core::latency::{rate_threshold, tau_server_full, tau_splitgp, RateFormula};
    rate_threshold(p, RateFormula::Exact).admits(p.uplink_rate) == (tau_splitgp(p) <= tau_server_full(p))
}
