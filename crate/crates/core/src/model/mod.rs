//! Deterministic toy policy stack: a language trunk producing conditioning
//! features and a diffusion-transformer head that refines an action latent.

mod attention;
mod layout;
mod mlp;
mod stack;

pub use attention::{attention_forward, AttentionWeights, BlockTaps};
pub use layout::{apply_layout, collect_site_inputs, Layout, LayoutConfig, ParseLayoutError};
pub use mlp::{gelu, mlp_forward, MlpWeights};
pub use stack::{Block, CalibSample, ModelConfig, PolicyStack};

use serde::{Deserialize, Serialize};

use crate::duquant::DuQuantFactorization;
use crate::error::{dims, invalid, Result};
use crate::numerics::{matmul, Matrix};
use crate::quantizer::QuantizedLinear;
use crate::scalar::Scalar;

/// Which half of the stack a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Llm,
    Dit,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Llm => "llm",
            Part::Dit => "dit",
        }
    }
}

/// Linear projections inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    MlpIn,
    MlpOut,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::MlpIn, Proj::MlpOut];

    pub fn is_attention(self) -> bool {
        matches!(self, Proj::Q | Proj::K | Proj::V | Proj::O)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Proj::Q => "attn.wq",
            Proj::K => "attn.wk",
            Proj::V => "attn.wv",
            Proj::O => "attn.wo",
            Proj::MlpIn => "mlp.w_in",
            Proj::MlpOut => "mlp.w_out",
        }
    }
}

/// Address of one linear layer in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub part: Part,
    pub block: usize,
    pub proj: Proj,
}

impl Site {
    pub fn name(&self) -> String {
        format!("{}.{}.{}", self.part.as_str(), self.block, self.proj.as_str())
    }
}

/// A linear layer `Y = X W + b`, either in floating point or in its deployed
/// integer form behind an activation-side transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Linear<T> {
    Float {
        /// `in x out`
        weight: Matrix<T>,
        bias: Option<Vec<T>>,
    },
    Quant {
        factorization: DuQuantFactorization<T>,
        layer: QuantizedLinear<T>,
    },
}

impl<T: Scalar> Linear<T> {
    pub fn float(weight: Matrix<T>, bias: Option<Vec<T>>) -> Self {
        Linear::Float { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Float { weight, .. } => weight.rows(),
            Linear::Quant { layer, .. } => layer.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Float { weight, .. } => weight.cols(),
            Linear::Quant { layer, .. } => layer.out_dim(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Linear::Quant { .. })
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            Linear::Float { bias, .. } => bias.as_deref(),
            Linear::Quant { layer, .. } => layer.bias.as_deref(),
        }
    }

    /// Floating weight, or `None` for a quantized layer.
    pub fn float_weight(&self) -> Option<&Matrix<T>> {
        match self {
            Linear::Float { weight, .. } => Some(weight),
            Linear::Quant { .. } => None,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        match self {
            Linear::Float { weight, bias } => {
                let y = matmul(x, weight)?;
                match bias {
                    Some(b) => y.add_row_vector(b),
                    None => Ok(y),
                }
            }
            Linear::Quant { factorization, layer } => layer.forward(&factorization.apply_activation_side(x)?),
        }
    }

    /// Multiplies output channels `[start, start + width)` (weights and bias)
    /// by `factor`. On a quantized layer this rescales the dequantization
    /// scales and leaves the integer grid untouched.
    pub fn scale_output_channels(&mut self, start: usize, width: usize, factor: T) -> Result<()> {
        if start + width > self.out_dim() {
            return Err(dims("Linear::scale_output_channels", self.out_dim(), start + width));
        }
        match self {
            Linear::Float { weight, bias } => {
                for r in 0..weight.rows() {
                    for v in &mut weight.row_mut(r)[start..start + width] {
                        *v *= factor;
                    }
                }
                if let Some(b) = bias {
                    for v in &mut b[start..start + width] {
                        *v *= factor;
                    }
                }
            }
            Linear::Quant { layer, .. } => {
                layer.scale_output_channels(start, width, factor);
                if !layer.folded_note.is_empty() {
                    layer.folded_note.push_str("; ");
                }
                layer
                    .folded_note
                    .push_str(&format!("scale[{start}..{}]*={factor}", start + width));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![T::one(); dim],
            beta: vec![T::zero(); dim],
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.gamma.len() {
            return Err(dims("LayerNorm::forward", self.gamma.len(), x.cols()));
        }
        let n = T::lit(x.cols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for ((v, &g), &b) in row.iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        Ok(out)
    }
}

/// Runtime attention scalars indexed by global attention block (language
/// blocks first, then diffusion blocks). `alpha[b][h]` multiplies the logits
/// of head `h`; `beta[b]` multiplies the block's projected output.
#[derive(Debug, Clone, Copy)]
pub struct Gains<'a, T> {
    pub alpha: &'a [Vec<T>],
    pub beta: &'a [T],
}

impl<'a, T: Scalar> Gains<'a, T> {
    pub(crate) fn for_block(&self, block: usize) -> Result<(&'a [T], T)> {
        match (self.alpha.get(block), self.beta.get(block)) {
            (Some(a), Some(&b)) => Ok((a.as_slice(), b)),
            _ => Err(invalid("Gains", format!("no scalars for block {block}"))),
        }
    }
}

/// Instrumentation hooks invoked during forward passes.
pub trait Probe<T> {
    fn linear_input(&mut self, _site: Site, _x: &Matrix<T>) {}
    /// `block` is the global attention block index.
    fn block_taps(&mut self, _block: usize, _taps: &BlockTaps<T>) {}
}

/// Probe that records nothing.
pub struct NoProbe;

impl<T> Probe<T> for NoProbe {}
