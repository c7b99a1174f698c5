//! Minimal deterministic differentiable network runtime.
//!
//! Layers are dense, conv2d (direct convolution), relu and flatten; only
//! dense and conv2d carry parameters and only their weights are quantizable.
//! A forward pass returns the logits together with a [`ForwardTrace`] holding
//! the activations and fake-quantization state needed by [`backward`]; owning
//! the trace is what ties a backward pass to the forward that produced it.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, Granularity, QuantPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// weight `[C_out, C_in]`
    Dense { weight: Tensor, bias: Option<Tensor> },
    /// weight `[C_out, C_in, K_h, K_w]`, zero padding
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    pub fn dense(weight: Tensor, bias: Option<Tensor>) -> Self {
        assert_eq!(weight.shape().len(), 2, "dense weight must be [C_out, C_in]");
        Layer::Dense { weight, bias }
    }

    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.shape().len(), 4, "conv weight must be [C_out, C_in, K_h, K_w]");
        assert!(stride >= 1, "conv stride must be >= 1");
        Layer::Conv2d { weight, bias, stride, padding }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_mut(),
            _ => None,
        }
    }

    pub fn is_quantizable(&self) -> bool {
        self.weight().is_some()
    }
}

/// Ordered layers plus the class count. Layer identifiers are the indices
/// into `layers`, stable across save/load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    network: Network,
}

impl Network {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Self {
        Network { layers, num_classes }
    }

    /// Total parameter count (weights and biases).
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight().map(Tensor::numel).unwrap_or(0) + l.bias().map(Tensor::numel).unwrap_or(0)
            })
            .sum()
    }

    /// Parameter tensors in deterministic order: (weight, bias) per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some(w) = layer.weight() {
                out.push(w);
            }
            if let Some(b) = layer.bias() {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = CheckpointFile { version: CHECKPOINT_VERSION, network: self.clone() };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&json)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        Ok(file.network)
    }
}

/// Architecture description used to build seeded networks from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchLayer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Dense {
        out_features: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    Flatten,
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(None, format!("kernel {kernel} larger than padded input {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Build a network with He-normal weights and zero biases, walking the
/// architecture to infer every fan-in. `input_shape` excludes the batch axis.
pub fn build_network(
    arch: &[ArchLayer],
    input_shape: &[usize],
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Network> {
    let mut shape: Vec<usize> = input_shape.to_vec();
    let mut layers = Vec::with_capacity(arch.len());
    for (idx, spec) in arch.iter().enumerate() {
        match *spec {
            ArchLayer::Conv2d { out_channels, kernel, stride, padding, bias } => {
                if shape.len() != 3 {
                    return Err(Error::shape(idx, format!("conv2d expects [C,H,W] input, got {shape:?}")));
                }
                let (c_in, h, w) = (shape[0], shape[1], shape[2]);
                let fan_in = c_in * kernel * kernel;
                let weight = he_normal(vec![out_channels, c_in, kernel, kernel], fan_in, rng);
                let bias = bias.then(|| Tensor::zeros(vec![out_channels]));
                layers.push(Layer::conv2d(weight, bias, stride, padding));
                shape = vec![
                    out_channels,
                    conv_out(h, kernel, stride, padding)?,
                    conv_out(w, kernel, stride, padding)?,
                ];
            }
            ArchLayer::Dense { out_features, bias } => {
                if shape.len() != 1 {
                    return Err(Error::shape(idx, format!("dense expects flat input, got {shape:?}")));
                }
                let fan_in = shape[0];
                let weight = he_normal(vec![out_features, fan_in], fan_in, rng);
                let bias = bias.then(|| Tensor::zeros(vec![out_features]));
                layers.push(Layer::dense(weight, bias));
                shape = vec![out_features];
            }
            ArchLayer::Relu => layers.push(Layer::Relu),
            ArchLayer::Flatten => {
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
        }
    }
    if shape != [num_classes] {
        return Err(Error::shape(
            None,
            format!("architecture output shape {shape:?} does not match {num_classes} classes"),
        ));
    }
    Ok(Network::new(layers, num_classes))
}

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Fake-quantization state of one scope recorded at forward time.
#[derive(Debug, Clone)]
pub struct ScopeQuantTrace {
    pub range: Range<usize>,
    pub bits: u32,
    pub scale: f64,
    /// True when the scale clamp was active (all-zero scope).
    pub clamped: bool,
}

/// Quantization state of one layer recorded at forward time.
#[derive(Debug, Clone)]
pub struct LayerQuantTrace {
    /// The fake-quantized weights the forward pass computed with.
    pub qweight: Tensor,
    pub scopes: Vec<ScopeQuantTrace>,
}

/// Activations and quantization state captured by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input tensor of layer `l`.
    inputs: Vec<Tensor>,
    quant: Vec<Option<LayerQuantTrace>>,
    batch: usize,
}

impl ForwardTrace {
    pub fn quant_trace(&self, layer_id: usize) -> Option<&LayerQuantTrace> {
        self.quant.get(layer_id).and_then(|q| q.as_ref())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Fake-quantize a layer's weights under the plan, recording scope state.
/// Scales are recomputed from the current floating weights.
fn quantize_layer_weights(
    weight: &Tensor,
    granularity: Granularity,
    bits: &[u32],
) -> LayerQuantTrace {
    let ranges = quant::scope_ranges(weight.shape(), granularity);
    debug_assert_eq!(ranges.len(), bits.len());
    let mut qweight = weight.clone();
    let mut scopes = Vec::with_capacity(ranges.len());
    for (range, &b) in ranges.into_iter().zip(bits) {
        let slice = &weight.data()[range.clone()];
        let max_abs = slice.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
        let raw = max_abs / quant::q_max(b);
        let scale = raw.max(quant::SCALE_EPS);
        let clamped = raw < quant::SCALE_EPS;
        quant::quantize_dequantize(&mut qweight.data_mut()[range.clone()], b, scale);
        scopes.push(ScopeQuantTrace { range, bits: b, scale, clamped });
    }
    LayerQuantTrace { qweight, scopes }
}

/// Run the network on a batch, optionally fake-quantizing weights per the
/// plan. Returns logits `[batch, C]` and the trace needed for [`backward`].
pub fn forward(network: &Network, batch: &Tensor, plan: Option<&QuantPlan>) -> Result<(Tensor, ForwardTrace)> {
    if batch.shape().is_empty() || batch.shape()[0] == 0 {
        return Err(Error::shape(None, "empty batch".to_string()));
    }
    if let Some(plan) = plan {
        plan.validate(network)?;
    }
    let n = batch.shape()[0];
    let mut inputs = Vec::with_capacity(network.layers.len());
    let mut quant_traces: Vec<Option<LayerQuantTrace>> = Vec::with_capacity(network.layers.len());
    let mut x = batch.clone();
    for (layer_id, layer) in network.layers.iter().enumerate() {
        inputs.push(x.clone());
        let plan_bits = plan.and_then(|p| p.bits.get(&layer_id));
        let qtrace = match (layer.weight(), plan_bits) {
            (Some(weight), Some(bits)) => {
                Some(quantize_layer_weights(weight, plan.unwrap().granularity, bits))
            }
            _ => None,
        };
        let effective_weight = qtrace.as_ref().map(|q| &q.qweight).or_else(|| layer.weight());
        x = apply_layer(layer, layer_id, &x, effective_weight)?;
        quant_traces.push(qtrace);
    }
    if x.shape() != [n, network.num_classes] {
        return Err(Error::shape(
            None,
            format!("network output shape {:?}, expected [{n}, {}]", x.shape(), network.num_classes),
        ));
    }
    x.check_finite("logits")?;
    Ok((x.clone(), ForwardTrace { inputs, quant: quant_traces, batch: n }))
}

fn apply_layer(layer: &Layer, layer_id: usize, x: &Tensor, weight: Option<&Tensor>) -> Result<Tensor> {
    match layer {
        Layer::Dense { bias, .. } => {
            let w = weight.expect("dense has weight");
            dense_forward(layer_id, x, w, bias.as_ref())
        }
        Layer::Conv2d { bias, stride, padding, .. } => {
            let w = weight.expect("conv has weight");
            conv2d_forward(layer_id, x, w, bias.as_ref(), *stride, *padding)
        }
        Layer::Relu => Ok(x.map(|v| v.max(0.0))),
        Layer::Flatten => {
            let n = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            x.reshaped(vec![n, rest])
        }
    }
}

fn dense_forward(layer_id: usize, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(
            layer_id,
            format!("dense input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, c_in) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    let mut y = Tensor::zeros(vec![n, c_out]);
    for i in 0..n {
        let xi = x.row(i);
        for o in 0..c_out {
            let wo = &w.data()[o * c_in..(o + 1) * c_in];
            let mut acc = bias.map(|b| b[o]).unwrap_or(0.0);
            for k in 0..c_in {
                acc += xi[k] * wo[k];
            }
            y.data_mut()[i * c_out + o] = acc;
        }
    }
    Ok(y)
}

fn conv2d_forward(
    layer_id: usize,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if x.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(
            layer_id,
            format!("conv input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let h_out = conv_out(h, kh, stride, padding).map_err(|_| {
        Error::shape(layer_id, format!("conv kernel {kh} too large for input height {h}"))
    })?;
    let w_out = conv_out(wd, kw, stride, padding).map_err(|_| {
        Error::shape(layer_id, format!("conv kernel {kw} too large for input width {wd}"))
    })?;
    let mut y = Tensor::zeros(vec![n, c_out, h_out, w_out]);
    let xd = x.data();
    let wdn = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for o in 0..c_out {
            let base_b = bias.map(|t| t[o]).unwrap_or(0.0);
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut acc = base_b;
                    for c in 0..c_in {
                        for u in 0..kh {
                            let ih = (i * stride + u) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (j * stride + v) as isize - padding as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi = xd[((b * c_in + c) * h + ih as usize) * wd + iw as usize];
                                let wi = wdn[((o * c_in + c) * kh + u) * kw + v];
                                acc += xi * wi;
                            }
                        }
                    }
                    yd[((b * c_out + o) * h_out + i) * w_out + j] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// Per-layer parameter gradients, aligned with `network.layers`. For layers
/// quantized in the traced forward, `scale` holds d(loss)/d(scale) per scope,
/// which the learnable bit-width trainer chains into logit gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerGrads {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub scale: Option<Vec<f64>>,
}

impl Gradients {
    /// Gradient tensors in the same order as [`Network::params`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for lg in &self.layers {
            if let Some(w) = &lg.weight {
                out.push(w);
            }
            if let Some(b) = &lg.bias {
                out.push(b);
            }
        }
        out
    }
}

/// Reverse pass over the traced forward. Weight gradients pass through the
/// STE mask when the layer was fake-quantized.
pub fn backward(network: &Network, trace: &ForwardTrace, dloss_dlogits: &Tensor) -> Result<Gradients> {
    if trace.inputs.len() != network.layers.len() {
        return Err(Error::shape(None, "trace does not match network".to_string()));
    }
    let mut grads: Vec<LayerGrads> = (0..network.layers.len()).map(|_| LayerGrads::default()).collect();
    let mut dy = dloss_dlogits.clone();
    for (layer_id, layer) in network.layers.iter().enumerate().rev() {
        let x = &trace.inputs[layer_id];
        let qtrace = trace.quant[layer_id].as_ref();
        match layer {
            Layer::Dense { weight, bias } => {
                let w_eff = qtrace.map(|q| &q.qweight).unwrap_or(weight);
                let (dx, mut dw, db) = dense_backward(x, w_eff, &dy);
                if bias.is_some() {
                    grads[layer_id].bias = Some(db);
                }
                if let Some(q) = qtrace {
                    grads[layer_id].scale = Some(scale_grads(&dw, weight, q));
                    apply_ste_mask(&mut dw, weight, q);
                }
                grads[layer_id].weight = Some(dw);
                dy = dx;
            }
            Layer::Conv2d { weight, bias, stride, padding } => {
                let w_eff = qtrace.map(|q| &q.qweight).unwrap_or(weight);
                let (dx, mut dw, db) = conv2d_backward(x, w_eff, &dy, *stride, *padding);
                if bias.is_some() {
                    grads[layer_id].bias = Some(db);
                }
                if let Some(q) = qtrace {
                    grads[layer_id].scale = Some(scale_grads(&dw, weight, q));
                    apply_ste_mask(&mut dw, weight, q);
                }
                grads[layer_id].weight = Some(dw);
                dy = dx;
            }
            Layer::Relu => {
                dy = dy.zip_map(x, |g, xi| if xi > 0.0 { g } else { 0.0 })?;
            }
            Layer::Flatten => {
                dy = dy.reshaped(x.shape().to_vec())?;
            }
        }
    }
    Ok(Gradients { layers: grads })
}

/// STE mask: zero the gradient where `|w| > q_max * s`.
fn apply_ste_mask(dw: &mut Tensor, weight: &Tensor, q: &LayerQuantTrace) {
    for s in &q.scopes {
        let limit = quant::q_max(s.bits) * s.scale;
        let wd = &weight.data()[s.range.clone()];
        let gd = &mut dw.data_mut()[s.range.clone()];
        for (g, &w) in gd.iter_mut().zip(wd) {
            if w.abs() > limit {
                *g = 0.0;
            }
        }
    }
}

/// d(loss)/d(scale) per scope: non-clipped weights contribute
/// `round(w/s) - w/s` (STE through the weight rounding), clipped weights
/// contribute `sign(w) * q_max`.
fn scale_grads(dqw: &Tensor, weight: &Tensor, q: &LayerQuantTrace) -> Vec<f64> {
    q.scopes
        .iter()
        .map(|s| {
            let qm = quant::q_max(s.bits);
            let limit = qm * s.scale;
            let wd = &weight.data()[s.range.clone()];
            let gd = &dqw.data()[s.range.clone()];
            let mut acc = 0.0;
            for (&g, &w) in gd.iter().zip(wd) {
                let dq_ds = if w.abs() <= limit {
                    quant::round_half_away(w / s.scale) - w / s.scale
                } else {
                    qm * w.signum()
                };
                acc += g * dq_ds;
            }
            acc
        })
        .collect()
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c_in) = (x.shape()[0], x.shape()[1]);
    let c_out = w.shape()[0];
    let mut dx = Tensor::zeros(vec![n, c_in]);
    let mut dw = Tensor::zeros(vec![c_out, c_in]);
    let mut db = Tensor::zeros(vec![c_out]);
    for i in 0..n {
        let xi = x.row(i);
        let dyi = dy.row(i);
        for o in 0..c_out {
            let g = dyi[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wo = &w.data()[o * c_in..(o + 1) * c_in];
            let dxi = &mut dx.data_mut()[i * c_in..(i + 1) * c_in];
            for k in 0..c_in {
                dxi[k] += g * wo[k];
            }
            let dwo = &mut dw.data_mut()[o * c_in..(o + 1) * c_in];
            for k in 0..c_in {
                dwo[k] += g * xi[k];
            }
        }
    }
    (dx, dw, db)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, padding: usize) -> (Tensor, Tensor, Tensor) {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (h_out, w_out) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dwt = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![c_out]);
    let xd = x.data();
    let wdn = w.data();
    let dyd = dy.data();
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..h_out {
                for j in 0..w_out {
                    let g = dyd[((b * c_out + o) * h_out + i) * w_out + j];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for c in 0..c_in {
                        for u in 0..kh {
                            let ih = (i * stride + u) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let iw = (j * stride + v) as isize - padding as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let xi_idx = ((b * c_in + c) * h + ih as usize) * wd + iw as usize;
                                let w_idx = ((o * c_in + c) * kh + u) * kw + v;
                                dwt.data_mut()[w_idx] += g * xd[xi_idx];
                                dx.data_mut()[xi_idx] += g * wdn[w_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dwt, db)
}

/// Row-wise softmax of a `[N, C]` logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.data_mut()[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out.data_mut()[i * c + j] /= denom;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch plus its gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        grad.data_mut()[i * c + labels[i]] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    for g in grad.data_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Per-sample cross-entropy losses, used for group-restricted losses.
pub fn per_sample_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for batch of {n}", labels.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.push(lse - row[y]);
    }
    Ok(out)
}

/// Predicted class per row (argmax, first index wins ties).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantPlan;

    fn identity_dense(n: usize) -> Layer {
        let mut w = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Layer::dense(w, Some(Tensor::zeros(vec![n])))
    }

    #[test]
    fn identity_dense_forward_is_identity() {
        let net = Network::new(vec![identity_dense(3)], 3);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        let (logits, _) = forward(&net, &x, None).unwrap();
        assert_eq!(logits.data(), x.data());
    }

    #[test]
    fn high_bit_quant_plan_is_near_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let net = build_network(
            &[ArchLayer::Dense { out_features: 5, bias: true }, ArchLayer::Relu, ArchLayer::Dense { out_features: 3, bias: true }],
            &[4],
            3,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.8, 0.1, 0.9, -0.2, 0.4, 1.1, -0.6]).unwrap();
        let (plain, _) = forward(&net, &x, None).unwrap();
        let plan = QuantPlan::uniform(&net, Granularity::PerChannel, 32);
        let (quant, _) = forward(&net, &x, Some(&plan)).unwrap();
        for (a, b) in plain.data().iter().zip(quant.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn two_layer_forward_matches_hand_matmul() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let net = build_network(
            &[ArchLayer::Dense { out_features: 3, bias: true }, ArchLayer::Dense { out_features: 2, bias: true }],
            &[2],
            2,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.7, -1.2]).unwrap();
        let (logits, _) = forward(&net, &x, None).unwrap();

        // independent evaluation by plain matrix arithmetic on the same weights
        let w1 = net.layers[0].weight().unwrap();
        let b1 = net.layers[0].bias().unwrap();
        let w2 = net.layers[1].weight().unwrap();
        let b2 = net.layers[1].bias().unwrap();
        let mut hidden = [0.0; 3];
        for o in 0..3 {
            hidden[o] = b1[o] + w1.data()[o * 2] * 0.7 + w1.data()[o * 2 + 1] * -1.2;
        }
        for o in 0..2 {
            let mut acc = b2[o];
            for k in 0..3 {
                acc += w2.data()[o * 3 + k] * hidden[k];
            }
            assert!((logits.data()[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch_naming_layer() {
        let net = Network::new(vec![identity_dense(3)], 3);
        let x = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let err = forward(&net, &x, None).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2, 4, 7] {
            let logits = Tensor::zeros(vec![3, c]);
            let (loss, _) = loss_cross_entropy(&logits, &vec![0; 3]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let logits = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = loss_cross_entropy(&logits, &[0]).unwrap();
        // oracle: ln(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 2.061153622438558e-9).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(vec![1, 2]);
        assert!(loss_cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut logits = Tensor::new(vec![2, 3], vec![0.4, -0.7, 1.3, 0.1, 0.2, -0.9]).unwrap();
        let labels = [2, 0];
        let (_, grad) = loss_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.numel() {
            let orig = logits[i];
            logits[i] = orig + h;
            let (lp, _) = loss_cross_entropy(&logits, &labels).unwrap();
            logits[i] = orig - h;
            let (lm, _) = loss_cross_entropy(&logits, &labels).unwrap();
            logits[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "entry {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 3], vec![5.0, -3.0, 0.2, 100.0, 99.0, 98.0]).unwrap();
        let p = softmax_rows(&logits);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = build_network(
            &[ArchLayer::Dense { out_features: 4, bias: true }, ArchLayer::Relu, ArchLayer::Dense { out_features: 2, bias: true }],
            &[3],
            2,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.3, 0.8, -0.2, 0.4]).unwrap();
        let (_, trace) = forward(&net, &x, None).unwrap();
        let grads = backward(&net, &trace, &Tensor::zeros(vec![2, 2])).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backward_stale_scale_zeroes_outside_clip() {
        // One dense layer with a weight far outside the stale clip range.
        let w = Tensor::new(vec![1, 2], vec![2.0, 0.1]).unwrap();
        let net = Network::new(vec![Layer::dense(w, None)], 1);
        let mut plan = QuantPlan::uniform(&net, Granularity::PerTensor, 4);
        plan.bits.insert(0, vec![4]);
        // Force a stale scale by quantizing through the plan but replacing the
        // trace scale: emulate via direct ste_backward check plus full pass.
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let (_, mut trace) = forward(&net, &x, Some(&plan)).unwrap();
        // overwrite the recorded scale with a deliberately small one
        if let Some(q) = trace.quant[0].as_mut() {
            q.scopes[0].scale = 0.1; // limit 0.7
        }
        let grads = backward(&net, &trace, &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let gw = grads.layers[0].weight.as_ref().unwrap();
        assert_eq!(gw.data()[0], 0.0);
        assert!(gw.data()[1] != 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let net = build_network(
            &[
                ArchLayer::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1, bias: true },
                ArchLayer::Relu,
                ArchLayer::Flatten,
                ArchLayer::Dense { out_features: 3, bias: true },
            ],
            &[1, 4, 4],
            3,
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn predictions_argmax() {
        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.3, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(predictions(&logits), vec![1, 0]);
    }
}
