//! Symmetric uniform fake quantization over scopes.
//!
//! A scope is the unit sharing one bit-width: either a whole weight tensor or
//! one output channel of it. For bit-width `b >= 2` the integer range is
//! `[-q_max, q_max]` with `q_max = 2^(b-1) - 1`; the scale maps the largest
//! absolute weight in the scope onto `q_max`. Quantize-dequantize keeps the
//! values in floating point so training gradients can flow through the
//! straight-through estimator.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;

/// Lower clamp for scales; keeps all-zero scopes from dividing by zero while
/// never binding for realistic weights, even at 32-bit plans where the raw
/// scale is already ~5e-10.
pub const SCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// One unit of weights sharing a bit-width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub layer_id: usize,
    /// Output-channel index, or `None` for a whole-tensor scope.
    pub channel: Option<usize>,
    /// Number of weights in the scope.
    pub size: usize,
}

/// Highest representable integer level for a bit-width.
pub fn q_max(bits: u32) -> f64 {
    assert!(bits >= 2, "bit-width must be >= 2, got {bits}");
    (2u64.pow(bits - 1) - 1) as f64
}

/// Scale for one scope: `max|w| / q_max`, clamped from below.
pub fn compute_scale(weights: &[f64], bits: u32) -> f64 {
    let max_abs = weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    (max_abs / q_max(bits)).max(SCALE_EPS)
}

/// Round half away from zero; shared tie rule for weights and bit proxies.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round implements round-half-away-from-zero exactly.
    x.round()
}

/// Quantize-dequantize one value: `s * clip(round(w/s), -q_max, q_max)`.
pub fn quantize_value(w: f64, bits: u32, scale: f64) -> f64 {
    let qm = q_max(bits);
    scale * round_half_away(w / scale).clamp(-qm, qm)
}

/// Fake-quantize a slice in place.
pub fn quantize_dequantize(weights: &mut [f64], bits: u32, scale: f64) {
    debug_assert!(scale >= SCALE_EPS);
    let qm = q_max(bits);
    for w in weights.iter_mut() {
        *w = scale * round_half_away(*w / scale).clamp(-qm, qm);
    }
}

/// STE surrogate gradient: pass the upstream gradient where `|w| <= q_max*s`.
pub fn ste_backward(upstream: &[f64], weights: &[f64], bits: u32, scale: f64) -> Vec<f64> {
    debug_assert_eq!(upstream.len(), weights.len());
    let limit = q_max(bits) * scale;
    upstream
        .iter()
        .zip(weights)
        .map(|(&g, &w)| if w.abs() <= limit { g } else { 0.0 })
        .collect()
}

/// Index ranges of the scopes induced by `granularity` over a weight tensor
/// stored row-major with the output channel as the first axis.
pub fn scope_ranges(weight_shape: &[usize], granularity: Granularity) -> Vec<Range<usize>> {
    let numel: usize = weight_shape.iter().product();
    match granularity {
        Granularity::PerTensor => vec![0..numel],
        Granularity::PerChannel => {
            let channels = weight_shape[0];
            let chunk = numel / channels;
            (0..channels).map(|c| c * chunk..(c + 1) * chunk).collect()
        }
    }
}

/// All scopes of a network's quantizable layers, ordered by layer index then
/// channel index.
pub fn enumerate_scopes(network: &Network, granularity: Granularity) -> Vec<Scope> {
    let mut scopes = Vec::new();
    for (layer_id, layer) in network.layers.iter().enumerate() {
        let Some(weight) = layer.weight() else { continue };
        for (idx, range) in scope_ranges(weight.shape(), granularity).iter().enumerate() {
            scopes.push(Scope {
                layer_id,
                channel: match granularity {
                    Granularity::PerTensor => None,
                    Granularity::PerChannel => Some(idx),
                },
                size: range.len(),
            });
        }
    }
    scopes
}

/// Per-layer fake-quantization directive for a forward pass. Scales are not
/// stored; they are recomputed from the current floating weights on every
/// quantized forward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub granularity: Granularity,
    /// layer_id -> per-scope bit-widths (one entry for per-tensor scopes,
    /// `C_out` entries for per-channel scopes).
    pub bits: BTreeMap<usize, Vec<u32>>,
}

impl QuantPlan {
    /// Uniform bit-width over every quantizable layer.
    pub fn uniform(network: &Network, granularity: Granularity, bits: u32) -> Self {
        let mut map = BTreeMap::new();
        for (layer_id, layer) in network.layers.iter().enumerate() {
            if let Some(weight) = layer.weight() {
                let n = scope_ranges(weight.shape(), granularity).len();
                map.insert(layer_id, vec![bits; n]);
            }
        }
        QuantPlan { granularity, bits: map }
    }

    /// Check the plan names only quantizable layers and matches scope counts.
    pub fn validate(&self, network: &Network) -> Result<()> {
        for (&layer_id, bits) in &self.bits {
            let Some(layer) = network.layers.get(layer_id) else {
                return Err(Error::config(format!("quant plan names missing layer {layer_id}")));
            };
            let Some(weight) = layer.weight() else {
                return Err(Error::config(format!(
                    "quant plan names non-quantizable layer {layer_id} ({})",
                    layer.kind_name()
                )));
            };
            let expected = scope_ranges(weight.shape(), self.granularity).len();
            if bits.len() != expected {
                return Err(Error::config(format!(
                    "quant plan for layer {layer_id} has {} scopes, expected {expected}",
                    bits.len()
                )));
            }
            if let Some(&b) = bits.iter().find(|&&b| b < 2) {
                return Err(Error::config(format!(
                    "quant plan for layer {layer_id} contains bit-width {b} < 2"
                )));
            }
        }
        Ok(())
    }
}
