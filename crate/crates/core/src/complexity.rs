//! FLOP, parameter-storage, and activation-memory accounting.
//!
//! Conventions:
//! - one multiply-accumulate is 2 FLOPs;
//! - batch norm costs 2 FLOPs per output element (folded scale and shift),
//!   ReLU, residual add, and average pooling 1 FLOP per element read;
//! - the classifier head is excluded from FLOP and parameter totals, since
//!   every domain brings its own;
//! - floats are stored at 32 bits and switches at 1 bit; a batch-norm layer
//!   stores 2 floats per channel once its statistics are folded in;
//! - activations are 32-bit and layers execute one after another.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, ConvShape};
use crate::error::{Error, Result};

pub const FLOAT_BITS: u64 = 32;
pub const SWITCH_BITS: u64 = 1;
pub const ACTIVATION_BYTES: u64 = 4;
pub const BN_FLOPS_PER_ELEMENT: u64 = 2;
pub const ELEMENTWISE_FLOPS_PER_ELEMENT: u64 = 1;
pub const BN_FLOATS_PER_CHANNEL: u64 = 2;

/// Mean of a binary switch vector.
pub fn layer_complexity(gate: &[bool]) -> Result<f64> {
    let r = layer_complexity_exact(gate)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// [`layer_complexity`] as an exact fraction.
pub fn layer_complexity_exact(gate: &[bool]) -> Result<Ratio<u64>> {
    if gate.is_empty() {
        return Err(Error::Invalid("complexity of an empty switch vector".into()));
    }
    let on = gate.iter().filter(|&&b| b).count() as u64;
    Ok(Ratio::new(on, gate.len() as u64))
}

/// FLOPs of one conv layer with `active` input channels.
pub fn conv_flops(shape: &ConvShape, active: usize) -> u64 {
    let s = &shape.spec;
    2 * (shape.out_h * shape.out_w * s.rows * s.cols * active * s.c_out) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub active_in_channels: usize,
    pub total_in_channels: usize,
    pub flops_forward: u64,
    /// Kernel weights needed at inference, in bits.
    pub param_bits: u64,
    /// Materialized input (active channels only) plus output, batch of one.
    pub activation_bytes: u64,
}

impl LayerCost {
    pub fn complexity(&self) -> Ratio<u64> {
        Ratio::new(self.active_in_channels as u64, self.total_in_channels as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerCost>,
    /// Mean over every switch of the network.
    pub complexity: f64,
    pub conv_flops: u64,
    /// Batch norm, ReLU, residual adds, and pooling.
    pub other_flops: u64,
    pub total_flops: u64,
    pub param_bits: u64,
    pub peak_activation_bytes: u64,
}

impl ComplexityReport {
    fn from_layers(layers: Vec<LayerCost>, other_flops: u64) -> Self {
        let conv_flops = layers.iter().map(|l| l.flops_forward).sum();
        let (on, total) = layers
            .iter()
            .fold((0usize, 0usize), |(a, t), l| (a + l.active_in_channels, t + l.total_in_channels));
        ComplexityReport {
            complexity: if total == 0 { 0.0 } else { on as f64 / total as f64 },
            conv_flops,
            other_flops,
            total_flops: conv_flops + other_flops,
            param_bits: layers.iter().map(|l| l.param_bits).sum(),
            peak_activation_bytes: layers.iter().map(|l| l.activation_bytes).max().unwrap_or(0),
            layers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>5} {:>8} {:>8} {:>14} {:>12} {:>12}", "layer", "active", "in", "flops", "param_bits", "act_bytes");
        for l in &self.layers {
            let c = layer_cost_complexity(l);
            let _ = writeln!(
                out,
                "{:>5} {:>8} {:>8} {:>14} {:>12} {:>12}   C={c:.4}",
                l.layer, l.active_in_channels, l.total_in_channels, l.flops_forward, l.param_bits, l.activation_bytes
            );
        }
        let _ = writeln!(
            out,
            "total: C={:.4} conv_flops={} other_flops={} flops={} param_bits={} peak_activation_bytes={}",
            self.complexity, self.conv_flops, self.other_flops, self.total_flops, self.param_bits, self.peak_activation_bytes
        );
        out
    }
}

fn layer_cost_complexity(l: &LayerCost) -> f64 {
    l.active_in_channels as f64 / l.total_in_channels.max(1) as f64
}

fn layer_cost(layer: usize, shape: &ConvShape, active: usize) -> LayerCost {
    let s = &shape.spec;
    let input_values = shape.in_h * shape.in_w * active;
    let output_values = shape.out_h * shape.out_w * s.c_out;
    LayerCost {
        layer,
        active_in_channels: active,
        total_in_channels: s.c_in,
        flops_forward: conv_flops(shape, active),
        param_bits: (s.rows * s.cols * active * s.c_out) as u64 * FLOAT_BITS,
        activation_bytes: (input_values + output_values) as u64 * ACTIVATION_BYTES,
    }
}

fn active_counts(shapes: &[ConvShape], gates: Option<&[&[bool]]>) -> Result<Vec<usize>> {
    match gates {
        None => Ok(shapes.iter().map(|s| s.spec.c_in).collect()),
        Some(g) => {
            if g.len() != shapes.len() {
                return Err(Error::Architecture(format!("{} switch vectors for {} conv layers", g.len(), shapes.len())));
            }
            shapes
                .iter()
                .zip(g)
                .enumerate()
                .map(|(l, (s, gate))| {
                    if gate.len() != s.spec.c_in {
                        return Err(Error::Architecture(format!(
                            "layer {l}: {} switches for {} input channels",
                            gate.len(),
                            s.spec.c_in
                        )));
                    }
                    Ok(gate.iter().filter(|&&b| b).count())
                })
                .collect()
        }
    }
}

/// Costs of a bare sequence of conv layers; no other ops are charged.
pub fn count_conv_layers(shapes: &[ConvShape], gates: Option<&[&[bool]]>) -> Result<ComplexityReport> {
    let active = active_counts(shapes, gates)?;
    let layers = shapes.iter().zip(active).enumerate().map(|(l, (s, a))| layer_cost(l, s, a)).collect();
    Ok(ComplexityReport::from_layers(layers, 0))
}

/// FLOPs of everything outside the convolutions; independent of switches.
fn non_conv_flops(arch: &Architecture, shapes: &[ConvShape]) -> u64 {
    let out_values = |l: usize| (shapes[l].out_h * shapes[l].out_w * shapes[l].spec.c_out) as u64;
    let bn: u64 = (0..shapes.len()).map(|l| BN_FLOPS_PER_ELEMENT * out_values(l)).sum();
    let mut elementwise = out_values(0); // stem ReLU
    for b in arch.blocks() {
        // inner ReLU, residual add, block ReLU
        elementwise += out_values(b.first) + 2 * out_values(b.second);
    }
    let last = arch.blocks().last().map(|b| b.second).unwrap_or(0);
    elementwise += out_values(last); // global average pool
    bn + ELEMENTWISE_FLOPS_PER_ELEMENT * elementwise
}

/// Full network report. Without `gates` it describes the backbone `Ψ₀`.
pub fn count_flops(arch: &Architecture, gates: Option<&[&[bool]]>) -> Result<ComplexityReport> {
    let shapes = arch.conv_shapes();
    let active = active_counts(&shapes, gates)?;
    let layers = shapes.iter().zip(active).enumerate().map(|(l, (s, a))| layer_cost(l, s, a)).collect();
    Ok(ComplexityReport::from_layers(layers, non_conv_flops(arch, &shapes)))
}

/// Average FLOP over the pretraining domain and every adapted domain,
/// relative to `Ψ₀`. The pretraining domain contributes exactly 1.
pub fn relative_flop(backbone: &ComplexityReport, adapters: &[ComplexityReport]) -> f64 {
    let base = backbone.total_flops as f64;
    let fractions: Vec<f64> = adapters.iter().map(|a| a.total_flops as f64 / base).collect();
    relative_flop_from_fractions(&fractions)
}

pub fn relative_flop_from_fractions(fractions: &[f64]) -> f64 {
    (1.0 + fractions.iter().sum::<f64>()) / (fractions.len() + 1) as f64
}

/// Bits of `θ₀` excluding the classifier: kernels plus batch norms.
pub fn backbone_param_bits(arch: &Architecture) -> u64 {
    arch.convs()
        .iter()
        .map(|c| c.kernel_len() as u64 * FLOAT_BITS + BN_FLOATS_PER_CHANNEL * c.c_out as u64 * FLOAT_BITS)
        .sum()
}

/// Bits of one (domain, budget) adapter excluding the classifier: one bit
/// per switch plus its own batch norms.
pub fn adapter_param_bits(arch: &Architecture) -> u64 {
    arch.convs()
        .iter()
        .map(|c| c.c_in as u64 * SWITCH_BITS + BN_FLOATS_PER_CHANNEL * c.c_out as u64 * FLOAT_BITS)
        .sum()
}

/// Total stored bits over the backbone and all adapters, relative to the backbone.
pub fn relative_params(backbone_bits: u64, adapter_bits: &[u64]) -> f64 {
    (backbone_bits + adapter_bits.iter().sum::<u64>()) as f64 / backbone_bits as f64
}

/// Peak activation bytes for batch-one inference under layer-sequential execution.
pub fn memory_footprint(arch: &Architecture, gates: Option<&[&[bool]]>) -> Result<u64> {
    Ok(count_flops(arch, gates)?.peak_activation_bytes)
}
