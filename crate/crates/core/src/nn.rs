//! Minimal feedforward engine: dense layers, relu, softmax cross-entropy and
//! exact backpropagation for the two-exit objective.
//!
//! Everything runs in `f64`. A model is an ordered list of [`Layer`]s; its
//! trainable parameters are exposed as a flat sequence of blocks (weight then
//! bias for each dense layer, in layer order). [`GradientSet`] mirrors that
//! block layout, which lets SGD and aggregation treat every segment alike.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One layer of a sequential network.
///
/// Dense weights are stored row-major with shape `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense {
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Activation {
        dim: usize,
        function: Activation,
    },
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let layer = Layer::Dense {
            in_dim,
            out_dim,
            weight,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn relu(dim: usize) -> Self {
        Layer::Activation {
            dim,
            function: Activation::Relu,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Layer::Activation {
            dim,
            function: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense { in_dim, .. } => *in_dim,
            Layer::Activation { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense { out_dim, .. } => *out_dim,
            Layer::Activation { dim, .. } => *dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias, .. } => weight.len() + bias.len(),
            Layer::Activation { .. } => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense {
                in_dim,
                out_dim,
                weight,
                bias,
            } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::shape("dense layer with a zero dimension"));
                }
                if weight.len() != in_dim * out_dim {
                    return Err(Error::shape(format!(
                        "dense weight has {} entries, expected {}x{}",
                        weight.len(),
                        out_dim,
                        in_dim
                    )));
                }
                if bias.len() != *out_dim {
                    return Err(Error::shape(format!(
                        "dense bias has {} entries, expected {}",
                        bias.len(),
                        out_dim
                    )));
                }
                if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::invalid("non-finite parameter in dense layer"));
                }
                Ok(())
            }
            Layer::Activation { dim, .. } => {
                if *dim == 0 {
                    return Err(Error::shape("activation layer with zero dimension"));
                }
                Ok(())
            }
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Layer::Dense {
                in_dim,
                weight,
                bias,
                ..
            } => {
                for (row, b) in weight.chunks_exact(*in_dim).zip(bias) {
                    let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                    out.push(dot + b);
                }
            }
            Layer::Activation { function, .. } => match function {
                Activation::Relu => out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 })),
                Activation::Identity => out.extend_from_slice(x),
            },
        }
    }
}

#[derive(Deserialize)]
struct ModelRepr {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
}

/// A sequential network or a contiguous segment of one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr")]
pub struct LayeredModel {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<ModelRepr> for LayeredModel {
    type Error = Error;

    fn try_from(repr: ModelRepr) -> Result<Self> {
        let model = LayeredModel::new(repr.layers)?;
        if model.input_dim != repr.input_dim || model.output_dim != repr.output_dim {
            return Err(Error::shape(format!(
                "declared dims {}->{} disagree with layers {}->{}",
                repr.input_dim, repr.output_dim, model.input_dim, model.output_dim
            )));
        }
        Ok(model)
    }
}

impl LayeredModel {
    /// Builds a model from layers, checking that adjacent dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::shape("model needs at least one layer"))?;
        let input_dim = first.in_dim();
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if layer.in_dim() != prev {
                return Err(Error::shape(format!(
                    "layer {i} expects input {} but previous layer emits {prev}",
                    layer.in_dim()
                )));
            }
            prev = layer.out_dim();
        }
        Ok(LayeredModel {
            input_dim,
            output_dim: prev,
            layers,
        })
    }

    /// Dense stack `dims[0] -> dims[1] -> ... -> dims[n]` with relu between
    /// consecutive dense layers and no activation after the last one.
    ///
    /// Weights are drawn uniformly in `±sqrt(6 / (in + out))` layer by layer in
    /// row-major order; biases start at zero.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("mlp needs at least an input and an output dim"));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(init_dense(pair[0], pair[1], rng)?);
            if i + 2 < dims.len() {
                layers.push(Layer::relu(pair[1]));
            }
        }
        LayeredModel::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Layers `range` as a standalone segment.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.layers.len() {
            return Err(Error::shape(format!(
                "slice {:?} of a {}-layer model",
                range,
                self.layers.len()
            )));
        }
        LayeredModel::new(self.layers[range].to_vec())
    }

    /// Appends `next` after `self`.
    pub fn concat(&self, next: &LayeredModel) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.extend_from_slice(&next.layers);
        LayeredModel::new(layers)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass keeping every intermediate activation; entry 0 is the input.
    pub fn forward_trace(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(input)?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.out_dim());
            layer.forward_into(trace.last().expect("trace starts non-empty"), &mut out);
            trace.push(out);
        }
        Ok(trace)
    }

    /// Backpropagates `grad_out` through a trace produced by
    /// [`forward_trace`](Self::forward_trace), accumulating parameter
    /// gradients into `grads`. Returns the gradient with respect to the input.
    pub fn backward(&self, trace: &[Vec<f64>], grad_out: &[f64], grads: &mut GradientSet) -> Vec<f64> {
        debug_assert_eq!(trace.len(), self.layers.len() + 1);
        let mut g = grad_out.to_vec();
        let mut block = grads.blocks.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace[i];
            match layer {
                Layer::Dense {
                    in_dim,
                    out_dim,
                    weight,
                    ..
                } => {
                    block -= 2;
                    let (dw, db) = {
                        let (head, tail) = grads.blocks.split_at_mut(block + 1);
                        (&mut head[block], &mut tail[0])
                    };
                    let mut gin = vec![0.0; *in_dim];
                    for o in 0..*out_dim {
                        let go = g[o];
                        db[o] += go;
                        let row = &weight[o * in_dim..(o + 1) * in_dim];
                        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for j in 0..*in_dim {
                            drow[j] += go * x[j];
                            gin[j] += row[j] * go;
                        }
                    }
                    g = gin;
                }
                Layer::Activation { function, .. } => {
                    if *function == Activation::Relu {
                        for (gv, &xv) in g.iter_mut().zip(x) {
                            if xv <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                }
            }
        }
        g
    }

    /// Parameter blocks in canonical order (weight, bias per dense layer).
    pub fn param_blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Dense { weight, bias, .. } => vec![weight.as_slice(), bias.as_slice()],
            Layer::Activation { .. } => Vec::new(),
        })
    }

    pub fn param_blocks_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| match l {
            Layer::Dense { weight, bias, .. } => vec![weight, bias],
            Layer::Activation { .. } => Vec::new(),
        })
    }

    /// All parameters flattened in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_blocks().flatten().copied().collect()
    }

    /// True when `other` has the same layer kinds and dimensions.
    pub fn same_shape(&self, other: &LayeredModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (
                    Layer::Dense {
                        in_dim: ai,
                        out_dim: ao,
                        ..
                    },
                    Layer::Dense {
                        in_dim: bi,
                        out_dim: bo,
                        ..
                    },
                ) => ai == bi && ao == bo,
                (
                    Layer::Activation {
                        dim: ad,
                        function: af,
                    },
                    Layer::Activation {
                        dim: bd,
                        function: bf,
                    },
                ) => ad == bd && af == bf,
                _ => false,
            })
    }

    /// In-place SGD update `p <- p - lr * g`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        grads.check_congruent(self)?;
        for (p, g) in self.param_blocks_mut().zip(&grads.blocks) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::shape(format!(
                "input has length {}, model expects {}",
                input.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn init_dense<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Layer> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weight = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Layer::dense(in_dim, out_dim, weight, vec![0.0; out_dim])
}

/// Gradient blocks shaped like the parameter blocks of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub blocks: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &LayeredModel) -> Self {
        GradientSet {
            blocks: model.param_blocks().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn check_congruent(&self, model: &LayeredModel) -> Result<()> {
        let ok = self.blocks.len() == model.param_blocks().count()
            && self
                .blocks
                .iter()
                .zip(model.param_blocks())
                .all(|(g, p)| g.len() == p.len());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("gradient set does not match the model segment"))
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks.iter().flatten().map(|v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.blocks
            .iter_mut()
            .flatten()
            .for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) -> Result<()> {
        if self.blocks.len() != other.blocks.len()
            || self.blocks.iter().zip(&other.blocks).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("gradient sets are not congruent"));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }
}

/// Numerically stable softmax and cross-entropy `-ln p[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            context: "softmax".into(),
            detail: "non-finite logit".into(),
        });
    }
    let (log_norm, probs) = log_softmax_parts(logits);
    Ok((log_norm - logits[label], probs))
}

/// Softmax probabilities of finite logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_parts(logits).1
}

fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (max + sum.ln(), probs)
}

/// Gradients and losses of `F = γ ℓ_C + (1-γ) ℓ_S` over one batch.
#[derive(Clone, Debug)]
pub struct MultiExitGradients {
    pub phi: GradientSet,
    pub head: GradientSet,
    pub theta: GradientSet,
    /// Batch mean of the client-exit loss.
    pub client_loss: f64,
    /// Batch mean of the server-exit loss.
    pub server_loss: f64,
    pub objective: f64,
}

/// Exact gradients of the two-exit objective for the segments
/// `phi -> head` (client exit) and `phi -> theta` (server exit).
///
/// The client exit contributes with weight `gamma`, the server exit with
/// `1 - gamma`; `phi` accumulates both contributions.
pub fn backward_multi_exit<S: Borrow<Sample>>(
    phi: &LayeredModel,
    head: &LayeredModel,
    theta: &LayeredModel,
    batch: &[S],
    gamma: f64,
) -> Result<MultiExitGradients> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if head.input_dim() != phi.output_dim() || theta.input_dim() != phi.output_dim() {
        return Err(Error::shape("head and theta must consume the cut-layer output"));
    }
    let n = batch.len() as f64;
    let mut out = MultiExitGradients {
        phi: GradientSet::zeros_like(phi),
        head: GradientSet::zeros_like(head),
        theta: GradientSet::zeros_like(theta),
        client_loss: 0.0,
        server_loss: 0.0,
        objective: 0.0,
    };
    let client_weight = gamma / n;
    let server_weight = (1.0 - gamma) / n;
    for sample in batch {
        let sample = sample.borrow();
        let phi_trace = phi.forward_trace(&sample.features)?;
        let cut = phi_trace.last().expect("non-empty trace");

        let mut grad_cut = vec![0.0; cut.len()];
        out.client_loss += exit_backward(head, cut, sample.label, client_weight, &mut out.head, &mut grad_cut)?;
        out.server_loss += exit_backward(theta, cut, sample.label, server_weight, &mut out.theta, &mut grad_cut)?;
        phi.backward(&phi_trace, &grad_cut, &mut out.phi);
    }
    out.client_loss /= n;
    out.server_loss /= n;
    out.objective = gamma * out.client_loss + (1.0 - gamma) * out.server_loss;
    check_finite(&out)?;
    Ok(out)
}

/// Loss of one exit on one sample; backpropagates `weight * dloss` into
/// `grads` and adds the cut-layer gradient to `grad_cut`.
fn exit_backward(
    exit: &LayeredModel,
    cut: &[f64],
    label: usize,
    weight: f64,
    grads: &mut GradientSet,
    grad_cut: &mut [f64],
) -> Result<f64> {
    let trace = exit.forward_trace(cut)?;
    let (loss, mut g) = softmax_cross_entropy(trace.last().expect("non-empty"), label)?;
    if weight != 0.0 {
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v *= weight);
        let gin = exit.backward(&trace, &g, grads);
        for (a, b) in grad_cut.iter_mut().zip(gin) {
            *a += b;
        }
    }
    Ok(loss)
}

fn check_finite(g: &MultiExitGradients) -> Result<()> {
    if !g.client_loss.is_finite() || !g.server_loss.is_finite() {
        return Err(Error::Numerical {
            context: "backward".into(),
            detail: "non-finite loss".into(),
        });
    }
    if !(g.phi.is_finite() && g.head.is_finite() && g.theta.is_finite()) {
        return Err(Error::Numerical {
            context: "backward".into(),
            detail: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// Gradient and mean cross-entropy of a single-exit model over one batch.
pub fn backward_single_exit<S: Borrow<Sample>>(
    model: &LayeredModel,
    batch: &[S],
) -> Result<(GradientSet, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = batch.len() as f64;
    let mut grads = GradientSet::zeros_like(model);
    let mut loss_sum = 0.0;
    for sample in batch {
        let sample = sample.borrow();
        let trace = model.forward_trace(&sample.features)?;
        let (loss, mut g) = softmax_cross_entropy(trace.last().expect("non-empty"), sample.label)?;
        loss_sum += loss;
        g[sample.label] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n);
        model.backward(&trace, &g, &mut grads);
    }
    let loss = loss_sum / n;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical {
            context: "backward".into(),
            detail: "non-finite loss or gradient".into(),
        });
    }
    Ok((grads, loss))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
