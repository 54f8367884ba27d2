use serde::{Deserialize, Serialize};

use super::{Linear, Part, Probe, Proj, Site};
use crate::error::{dims, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Two-layer feed-forward block with a tanh-approximated GELU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MlpWeights<T> {
    pub w_in: Linear<T>,
    pub w_out: Linear<T>,
}

impl<T: Scalar> MlpWeights<T> {
    pub fn proj(&self, p: Proj) -> Option<&Linear<T>> {
        match p {
            Proj::MlpIn => Some(&self.w_in),
            Proj::MlpOut => Some(&self.w_out),
            _ => None,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> Option<&mut Linear<T>> {
        match p {
            Proj::MlpIn => Some(&mut self.w_in),
            Proj::MlpOut => Some(&mut self.w_out),
            _ => None,
        }
    }
}

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn mlp_forward<T: Scalar>(x: &Matrix<T>, w: &MlpWeights<T>) -> Result<Matrix<T>> {
    mlp_forward_probed(x, w, None, &mut super::NoProbe)
}

pub(crate) fn mlp_forward_probed<T: Scalar>(
    x: &Matrix<T>,
    w: &MlpWeights<T>,
    at: Option<(Part, usize)>,
    probe: &mut dyn Probe<T>,
) -> Result<Matrix<T>> {
    if w.w_in.out_dim() != w.w_out.in_dim() {
        return Err(dims("mlp_forward", w.w_in.out_dim(), w.w_out.in_dim()));
    }
    if let Some((part, block)) = at {
        probe.linear_input(
            Site {
                part,
                block,
                proj: Proj::MlpIn,
            },
            x,
        );
    }
    let hidden = w.w_in.forward(x)?.map(gelu);
    if let Some((part, block)) = at {
        probe.linear_input(
            Site {
                part,
                block,
                proj: Proj::MlpOut,
            },
            &hidden,
        );
    }
    w.w_out.forward(&hidden)
}
