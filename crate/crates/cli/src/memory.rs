//! Storage accounting against a 16-bit baseline.
//!
//! A quantized linear stores its `b`-bit weight grid, one 16-bit scale per
//! output channel, 4 bytes of static activation parameters, a 16-bit bias,
//! and its factorization: a 16-bit smoothing vector, a 16-bit permutation
//! index per channel and the 8-byte seed its rotation blocks are drawn
//! from. Every other parameter costs 2 bytes.

use serde::{Deserialize, Serialize};
use vlaquant::model::{Linear, Site};
use vlaquant::{Layout, QuantSpec, Stack};

pub const BASELINE_BYTES: u64 = 2;
pub const SCALE_BYTES: u64 = 2;
pub const ACT_QPARAM_BYTES: u64 = 4;
pub const ROTATION_SEED_BYTES: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub name: String,
    pub params: u64,
    pub quantized: bool,
    /// Bits per stored weight element.
    pub stored_bits: u32,
    /// Scale and zero-point bytes.
    pub scale_bytes: u64,
    pub factorization_bytes: u64,
    pub float_bytes: u64,
    pub quant_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub layers: Vec<LayerMemory>,
    pub float_bytes: u64,
    pub quant_bytes: u64,
    /// `1 - quant_bytes / float_bytes`
    pub relative_savings: f64,
}

impl MemoryEstimate {
    pub fn from_layers(layers: Vec<LayerMemory>) -> Self {
        let float_bytes = layers.iter().map(|l| l.float_bytes).sum();
        let quant_bytes = layers.iter().map(|l| l.quant_bytes).sum();
        let relative_savings = if float_bytes == 0 {
            0.0
        } else {
            1.0 - quant_bytes as f64 / float_bytes as f64
        };
        Self {
            layers,
            float_bytes,
            quant_bytes,
            relative_savings,
        }
    }
}

/// Unquantized parameter group.
pub fn float_layer(name: impl Into<String>, params: u64) -> LayerMemory {
    LayerMemory {
        name: name.into(),
        params,
        quantized: false,
        stored_bits: 16,
        scale_bytes: 0,
        factorization_bytes: 0,
        float_bytes: params * BASELINE_BYTES,
        quant_bytes: params * BASELINE_BYTES,
    }
}

/// Linear layer `in x out` (plus `out` bias entries when `bias`), quantized
/// to `weight_bits` when given. `factorized` adds the factorization storage.
pub fn linear_layer(
    name: impl Into<String>,
    in_dim: u64,
    out_dim: u64,
    bias: bool,
    weight_bits: Option<u32>,
    factorized: bool,
) -> LayerMemory {
    let weights = in_dim * out_dim;
    let bias_params = if bias { out_dim } else { 0 };
    let Some(bits) = weight_bits else {
        return float_layer(name, weights + bias_params);
    };
    let scale_bytes = out_dim * SCALE_BYTES + ACT_QPARAM_BYTES;
    let factorization_bytes = if factorized {
        in_dim * BASELINE_BYTES + in_dim * BASELINE_BYTES + ROTATION_SEED_BYTES
    } else {
        0
    };
    let weight_bytes = (weights * bits as u64).div_ceil(8);
    LayerMemory {
        name: name.into(),
        params: weights + bias_params,
        quantized: true,
        stored_bits: bits,
        scale_bytes,
        factorization_bytes,
        float_bytes: (weights + bias_params) * BASELINE_BYTES,
        quant_bytes: weight_bytes + scale_bytes + factorization_bytes + bias_params * BASELINE_BYTES,
    }
}

fn site_layer(name: String, lin: &Linear<f64>, bits: Option<u32>) -> LayerMemory {
    linear_layer(
        name,
        lin.in_dim() as u64,
        lin.out_dim() as u64,
        lin.bias().is_some(),
        bits,
        bits.is_some(),
    )
}

fn other_layers(stack: &Stack) -> Vec<LayerMemory> {
    let d = stack.config.model_dim as u64;
    let mut out = Vec::new();
    for site in stack.sites().into_iter().filter(|s| s.proj == vlaquant::model::Proj::Q) {
        out.push(float_layer(
            format!("{}.{}.norms", site.part.as_str(), site.block),
            4 * d,
        ));
    }
    out.push(site_layer("action_in".into(), &stack.action_in, None));
    out.push(float_layer("timestep_embedding", stack.timestep_embedding.len() as u64));
    out.push(float_layer("final_norm", 2 * d));
    out.push(site_layer("action_out".into(), &stack.action_out, None));
    out
}

fn estimate_with(stack: &Stack, bits_for: impl Fn(Site, &Linear<f64>) -> Option<u32>) -> MemoryEstimate {
    let mut layers: Vec<LayerMemory> = stack
        .sites()
        .into_iter()
        .map(|s| {
            let lin = stack.linear(s).expect("site exists");
            site_layer(s.name(), lin, bits_for(s, lin))
        })
        .collect();
    layers.extend(other_layers(stack));
    MemoryEstimate::from_layers(layers)
}

/// Storage if `layout` were applied to `stack` with `spec`'s weight width.
pub fn estimate_memory(stack: &Stack, layout: Layout, spec: &QuantSpec) -> MemoryEstimate {
    estimate_with(stack, |s, _| layout.quantizes(s).then_some(spec.weight_bits))
}

/// Storage of a stack as it is, counting the layers it actually quantizes.
pub fn estimate_stack(stack: &Stack) -> MemoryEstimate {
    estimate_with(stack, |_, lin| match lin {
        Linear::Quant { layer, .. } => Some(layer.weight_bits),
        Linear::Float { .. } => None,
    })
}
