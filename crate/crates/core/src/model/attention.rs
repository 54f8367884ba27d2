use serde::{Deserialize, Serialize};

use super::{Linear, Part, Probe, Proj, Site};
use crate::error::{dims, invalid, Result};
use crate::numerics::{matmul, softmax_rows, Matrix};
use crate::scalar::Scalar;

/// Multi-head attention projections. `w_o` carries the output bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AttentionWeights<T> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_o: Linear<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn proj(&self, p: Proj) -> Option<&Linear<T>> {
        match p {
            Proj::Q => Some(&self.w_q),
            Proj::K => Some(&self.w_k),
            Proj::V => Some(&self.w_v),
            Proj::O => Some(&self.w_o),
            _ => None,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> Option<&mut Linear<T>> {
        match p {
            Proj::Q => Some(&mut self.w_q),
            Proj::K => Some(&mut self.w_k),
            Proj::V => Some(&mut self.w_v),
            Proj::O => Some(&mut self.w_o),
            _ => None,
        }
    }
}

/// Intermediate values of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTaps<T> {
    /// Per head, the logits fed to softmax (after any runtime gain).
    pub logits: Vec<Matrix<T>>,
    pub attention: Vec<Matrix<T>>,
    /// Projected output injected into the residual stream (after any runtime
    /// gain), bias included.
    pub z: Matrix<T>,
    /// Residual stream before and after the attention update. Filled in by
    /// the enclosing block; equal to `z`-shaped zeros when called standalone.
    pub residual_in: Matrix<T>,
    pub residual_out: Matrix<T>,
}

/// Multi-head attention with queries from `x_q` and keys/values from `x_kv`.
///
/// Per head `h`: `L_h = alpha_h (x_q W_q)_h (x_kv W_k)_h^T / sqrt(d)`,
/// `A_h = softmax(L_h)`, and the block output is
/// `Z = beta (Concat_h(A_h V_h) W_o + b_o)`. `gains = None` skips the scalar
/// multiplications entirely.
pub fn attention_forward<T: Scalar>(
    x_q: &Matrix<T>,
    x_kv: &Matrix<T>,
    w: &AttentionWeights<T>,
    gains: Option<(&[T], T)>,
) -> Result<(Matrix<T>, BlockTaps<T>)> {
    attention_forward_probed(x_q, x_kv, w, gains, None, &mut super::NoProbe)
}

pub(crate) fn attention_forward_probed<T: Scalar>(
    x_q: &Matrix<T>,
    x_kv: &Matrix<T>,
    w: &AttentionWeights<T>,
    gains: Option<(&[T], T)>,
    at: Option<(Part, usize)>,
    probe: &mut dyn Probe<T>,
) -> Result<(Matrix<T>, BlockTaps<T>)> {
    const OP: &str = "attention_forward";
    let dim = w.model_dim();
    if x_q.cols() != dim || x_kv.cols() != dim {
        return Err(dims(OP, dim, format!("{} / {}", x_q.cols(), x_kv.cols())));
    }
    if let Some((alpha, beta)) = gains {
        if alpha.len() != w.heads {
            return Err(dims(OP, w.heads, alpha.len()));
        }
        if alpha.iter().any(|&a| !(a > T::zero())) || !(beta > T::zero()) {
            return Err(invalid(OP, "attention scalars must be positive"));
        }
    }
    let mut record = |proj: Proj, x: &Matrix<T>| {
        if let Some((part, block)) = at {
            probe.linear_input(Site { part, block, proj }, x);
        }
    };

    record(Proj::Q, x_q);
    let q = w.w_q.forward(x_q)?;
    record(Proj::K, x_kv);
    let k = w.w_k.forward(x_kv)?;
    record(Proj::V, x_kv);
    let v = w.w_v.forward(x_kv)?;

    let d = w.head_dim;
    let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
    let mut logits = Vec::with_capacity(w.heads);
    let mut attention = Vec::with_capacity(w.heads);
    let mut outputs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = q.col_block(h * d, d);
        let kh = k.col_block(h * d, d);
        let vh = v.col_block(h * d, d);
        let mut l = matmul(&qh, &kh.transpose())?.scale(inv_sqrt_d);
        if let Some((alpha, _)) = gains {
            l = l.scale(alpha[h]);
        }
        let a = softmax_rows(&l);
        outputs.push(matmul(&a, &vh)?);
        logits.push(l);
        attention.push(a);
    }
    let concat = Matrix::hcat(&outputs)?;
    record(Proj::O, &concat);
    let mut z = w.w_o.forward(&concat)?;
    if let Some((_, beta)) = gains {
        z = z.scale(beta);
    }
    let zeros = Matrix::zeros(z.rows(), z.cols());
    let taps = BlockTaps {
        logits,
        attention,
        z: z.clone(),
        residual_in: zeros.clone(),
        residual_out: zeros,
    };
    Ok((z, taps))
}
