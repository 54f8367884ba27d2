//! Round-to-nearest integer quantization.
//!
//! Activations use an unsigned asymmetric grid with a static per-site scale
//! and zero point:
//!
//! ```text
//! X~ = clip(round(X / dX) + zX, 0, 2^bX - 1)        X^ = dX (X~ - zX)
//! ```
//!
//! Weights use a signed symmetric grid with one scale per output channel
//! (column `o` of the `in x out` weight matrix):
//!
//! ```text
//! W~[:, o] = clip(round(W[:, o] / dW[o]), -2^(bW-1), 2^(bW-1) - 1)   W^[:, o] = dW[o] W~[:, o]
//! ```
//!
//! Rounding is half-away-from-zero throughout.

use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::scalar::Scalar;

/// Widening applied to a degenerate activation range.
pub const RANGE_WIDEN: f64 = 1e-6;
/// Scale used for an all-zero weight channel.
pub const ZERO_CHANNEL_SCALE: f64 = 1e-12;
/// Largest inner dimension accepted by [`integer_linear`].
pub const MAX_INNER_DIM: usize = 1 << 15;
/// Largest bit width accepted on either operand of [`integer_linear`].
pub const MAX_GEMM_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

/// Bit widths and calibration settings for one quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub percentile: f64,
    #[serde(default)]
    pub rounding: Rounding,
}

impl Default for QuantSpec {
    /// W4A8 with a 99.9th percentile activation clip.
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 8,
            percentile: 99.9,
            rounding: Rounding::HalfAwayFromZero,
        }
    }
}

impl QuantSpec {
    pub fn new(weight_bits: u32, act_bits: u32, percentile: f64) -> Result<Self> {
        let spec = Self {
            weight_bits,
            act_bits,
            percentile,
            rounding: Rounding::HalfAwayFromZero,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Weight widths above 8 are accepted here for high-precision reference
    /// runs; the checkpoint container only stores 8-bit weight grids.
    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.weight_bits) {
            return Err(invalid(
                "QuantSpec",
                format!("weight bits {} outside [2, 16]", self.weight_bits),
            ));
        }
        if !(2..=16).contains(&self.act_bits) {
            return Err(invalid(
                "QuantSpec",
                format!("activation bits {} outside [2, 16]", self.act_bits),
            ));
        }
        if !(self.percentile > 50.0 && self.percentile <= 100.0) {
            return Err(invalid(
                "QuantSpec",
                format!("percentile {} outside (50, 100]", self.percentile),
            ));
        }
        Ok(())
    }
}

/// Row-major integer matrix holding grid values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl IntMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dims("IntMatrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: i32) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_real<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Static affine parameters of an unsigned activation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActivationQParams<T> {
    pub delta: T,
    pub zero_point: i32,
    pub bits: u32,
}

impl<T: Scalar> ActivationQParams<T> {
    pub fn qmax(&self) -> i32 {
        ((1i64 << self.bits) - 1) as i32
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > T::zero()) || !self.delta.is_finite() {
            return Err(invalid("ActivationQParams", "scale must be positive and finite"));
        }
        if !(1..=MAX_GEMM_BITS).contains(&self.bits) {
            return Err(invalid("ActivationQParams", format!("bits {} out of range", self.bits)));
        }
        if self.zero_point < 0 || self.zero_point > self.qmax() {
            return Err(invalid("ActivationQParams", "zero point outside grid"));
        }
        Ok(())
    }
}

/// Deployable form of one linear layer `Y = X W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct QuantizedLinear<T> {
    /// `in x out`; column `o` is output channel `o`.
    pub int_weights: IntMatrix,
    pub channel_scales: Vec<T>,
    pub weight_bits: u32,
    pub bias: Option<Vec<T>>,
    pub act_qparams: Option<ActivationQParams<T>>,
    /// Free-text record of transforms folded into this layer.
    pub folded_note: String,
}

impl<T: Scalar> QuantizedLinear<T> {
    pub fn in_dim(&self) -> usize {
        self.int_weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.int_weights.cols()
    }

    pub fn dequantized_weights(&self) -> Matrix<T> {
        let mut w = self.int_weights.to_real::<T>();
        for r in 0..w.rows() {
            for (v, &s) in w.row_mut(r).iter_mut().zip(&self.channel_scales) {
                *v *= s;
            }
        }
        w
    }

    /// Multiplies output channels `[start, start + width)` by `factor`:
    /// their dequantization scales and bias entries both scale.
    pub fn scale_output_channels(&mut self, start: usize, width: usize, factor: T) {
        for s in &mut self.channel_scales[start..start + width] {
            *s *= factor;
        }
        if let Some(b) = &mut self.bias {
            for v in &mut b[start..start + width] {
                *v *= factor;
            }
        }
    }

    /// Quantizes `x` with the attached static activation parameters and runs
    /// the integer product.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let q = self
            .act_qparams
            .ok_or_else(|| invalid("QuantizedLinear::forward", "no activation parameters attached"))?;
        integer_linear(&quantize_activations(x, &q), &q, self)
    }
}

/// Nearest-rank percentile range over the pooled entries of `samples`.
///
/// `hi` is the element at rank `ceil(p/100 * N)` from the bottom and `lo` the
/// element at the same rank from the top.
pub fn estimate_activation_range<T: Scalar>(samples: &[Matrix<T>], percentile: f64) -> Result<(T, T)> {
    let mut pool: Vec<T> = samples.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    range_of_pool(&mut pool, percentile)
}

pub(crate) fn range_of_pool<T: Scalar>(pool: &mut [T], percentile: f64) -> Result<(T, T)> {
    const OP: &str = "estimate_activation_range";
    if pool.is_empty() {
        return Err(Error::Empty { op: OP });
    }
    if !(percentile > 50.0 && percentile <= 100.0) {
        return Err(invalid(OP, format!("percentile {percentile} outside (50, 100]")));
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = pool.len();
    // the small offset absorbs representation error in p*N/100 for exact ranks
    let rank = ((percentile * n as f64) / 100.0 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let hi = pool[rank - 1];
    let lo = pool[n - rank];
    if lo < hi {
        Ok((lo, hi))
    } else {
        Ok((lo, lo + T::lit(RANGE_WIDEN)))
    }
}

pub fn make_activation_qparams<T: Scalar>(lo: T, hi: T, bits: u32) -> Result<ActivationQParams<T>> {
    const OP: &str = "make_activation_qparams";
    if !(lo < hi) {
        return Err(invalid(OP, "lo must be strictly below hi"));
    }
    if !(1..=MAX_GEMM_BITS).contains(&bits) {
        return Err(invalid(OP, format!("bits {bits} out of range")));
    }
    let qmax = ((1i64 << bits) - 1) as f64;
    let delta = (hi - lo) / T::lit(qmax);
    let z = (-lo / delta).round_half_away().to_f64_lossy().clamp(0.0, qmax);
    Ok(ActivationQParams {
        delta,
        zero_point: z as i32,
        bits,
    })
}

fn clamp_round<T: Scalar>(v: T, lo: i64, hi: i64) -> i32 {
    let r = v.round_half_away().to_f64_lossy();
    r.clamp(lo as f64, hi as f64) as i32
}

pub fn quantize_activations<T: Scalar>(x: &Matrix<T>, q: &ActivationQParams<T>) -> IntMatrix {
    let qmax = q.qmax() as i64;
    let z = q.zero_point as i64;
    let data = x
        .as_slice()
        .iter()
        .map(|&v| {
            // adding z before clipping is done in floating point to avoid overflow on huge inputs
            let shifted = (v / q.delta).round_half_away() + T::lit(z as f64);
            clamp_round(shifted, 0, qmax)
        })
        .collect();
    IntMatrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

pub fn dequantize_activations<T: Scalar>(xq: &IntMatrix, q: &ActivationQParams<T>) -> Result<Matrix<T>> {
    let qmax = q.qmax();
    if xq.data.iter().any(|&v| v < 0 || v > qmax) {
        return Err(invalid("dequantize_activations", "entry outside activation grid"));
    }
    Ok(Matrix::from_raw(
        xq.rows,
        xq.cols,
        xq.data
            .iter()
            .map(|&v| q.delta * T::lit((v - q.zero_point) as f64))
            .collect(),
    ))
}

/// Symmetric per-output-channel weight quantization of an `in x out` matrix.
pub fn quantize_weights_per_channel<T: Scalar>(w: &Matrix<T>, bits: u32) -> Result<QuantizedLinear<T>> {
    const OP: &str = "quantize_weights_per_channel";
    if w.is_empty() {
        return Err(Error::Empty { op: OP });
    }
    if !(2..=MAX_GEMM_BITS).contains(&bits) {
        return Err(invalid(OP, format!("bits {bits} out of range")));
    }
    let qpos = (1i64 << (bits - 1)) - 1;
    let qneg = -(1i64 << (bits - 1));
    let scales: Vec<T> = (0..w.cols())
        .map(|o| {
            let m = (0..w.rows()).fold(T::zero(), |m, r| m.max(w.get(r, o).abs()));
            if m == T::zero() {
                T::lit(ZERO_CHANNEL_SCALE)
            } else {
                m / T::lit(qpos as f64)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(w.len());
    for r in 0..w.rows() {
        for (o, &s) in scales.iter().enumerate() {
            data.push(clamp_round(w.get(r, o) / s, qneg, qpos));
        }
    }
    Ok(QuantizedLinear {
        int_weights: IntMatrix {
            rows: w.rows(),
            cols: w.cols(),
            data,
        },
        channel_scales: scales,
        weight_bits: bits,
        bias: None,
        act_qparams: None,
        folded_note: String::new(),
    })
}

/// Integer GEMM with dequantization:
/// `Y[t,o] = dX dW[o] (sum_j X~[t,j] W~[j,o] - zX sum_j W~[j,o]) + b[o]`.
///
/// Products are accumulated in `i64`; the accepted envelope (inner dimension
/// up to 2^15, both operands up to 16 bits) keeps every partial sum below 2^47.
pub fn integer_linear<T: Scalar>(
    xq: &IntMatrix,
    q: &ActivationQParams<T>,
    layer: &QuantizedLinear<T>,
) -> Result<Matrix<T>> {
    const OP: &str = "integer_linear";
    q.validate()?;
    let w = &layer.int_weights;
    if xq.cols != w.rows {
        return Err(dims(OP, w.rows, xq.cols));
    }
    if layer.channel_scales.len() != w.cols {
        return Err(dims(OP, w.cols, layer.channel_scales.len()));
    }
    if let Some(b) = &layer.bias {
        if b.len() != w.cols {
            return Err(dims(OP, w.cols, b.len()));
        }
    }
    if xq.cols > MAX_INNER_DIM || q.bits > MAX_GEMM_BITS || layer.weight_bits > MAX_GEMM_BITS {
        return Err(Error::AccumulatorOverflow {
            inner: xq.cols,
            act_bits: q.bits,
            weight_bits: layer.weight_bits,
        });
    }
    let qmax = q.qmax();
    if xq.data.iter().any(|&v| v < 0 || v > qmax) {
        return Err(invalid(OP, "activation entry outside grid"));
    }
    let wlim = 1i32 << (layer.weight_bits - 1);
    if w.data.iter().any(|&v| v < -wlim || v >= wlim) {
        return Err(invalid(OP, "weight entry outside grid"));
    }

    let (n, k, m) = (xq.rows, xq.cols, w.cols);
    let mut col_sums = vec![0i64; m];
    for j in 0..k {
        for (s, &v) in col_sums.iter_mut().zip(w.row(j)) {
            *s += v as i64;
        }
    }
    let z = q.zero_point as i64;
    let mut acc = vec![0i64; m];
    let mut out = Vec::with_capacity(n * m);
    for t in 0..n {
        acc.iter_mut().for_each(|a| *a = 0);
        for (j, &xv) in xq.row(t).iter().enumerate() {
            if xv == 0 {
                continue;
            }
            let xv = xv as i64;
            for (a, &wv) in acc.iter_mut().zip(w.row(j)) {
                *a += xv * wv as i64;
            }
        }
        for o in 0..m {
            let total = acc[o] - z * col_sums[o];
            let mut y = q.delta * layer.channel_scales[o] * T::lit(total as f64);
            if let Some(b) = &layer.bias {
                y += b[o];
            }
            out.push(y);
        }
    }
    Ok(Matrix::from_raw(n, m, out))
}

/// Simulated quantization: quantize and dequantize both operands, then run a
/// real product. Reference path for [`integer_linear`].
pub fn fake_quant_linear<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    bias: Option<&[T]>,
    spec: &QuantSpec,
    range: (T, T),
) -> Result<Matrix<T>> {
    spec.validate()?;
    let q = make_activation_qparams(range.0, range.1, spec.act_bits)?;
    let xhat = dequantize_activations(&quantize_activations(x, &q), &q)?;
    let what = quantize_weights_per_channel(w, spec.weight_bits)?.dequantized_weights();
    let y = matmul(&xhat, &what)?;
    match bias {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}
