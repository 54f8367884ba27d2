//! Error-propagation analysis for attention blocks.
//!
//! Covers the scale arithmetic of a quantized attention block (effective
//! temperature, integer logits, the value/output energy path), first-order
//! predictions of how an input perturbation moves logits and outputs, a
//! convergence check certifying those predictions, and per-block
//! Std/RMS curves comparing a teacher with raw and calibrated students.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::TeacherForcing;
use crate::error::{dims, invalid, Error, Result};
use crate::model::{AttentionWeights, CalibSample, Part, PolicyStack};
use crate::numerics::{matmul, softmax_jacobian_apply, softmax_rows, Matrix};
use crate::quantizer::IntMatrix;
use crate::scalar::Scalar;

/// Dequantization scales of the Q, K, V and O operands of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ScaleTuple<T> {
    pub s_q: T,
    pub s_k: T,
    pub s_v: T,
    pub s_o: T,
    pub head_dim: usize,
}

impl<T: Scalar> ScaleTuple<T> {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.s_q, self.s_k, self.s_v, self.s_o]
            .iter()
            .all(|&s| s > T::zero() && s.is_finite());
        if !all_positive || self.head_dim == 0 {
            return Err(invalid("ScaleTuple", "scales and head dimension must be positive"));
        }
        Ok(())
    }
}

/// `sqrt(d) / (s_q s_k)`
pub fn effective_temperature<T: Scalar>(s: &ScaleTuple<T>) -> Result<T> {
    s.validate()?;
    Ok(T::lit(s.head_dim as f64).sqrt() / (s.s_q * s.s_k))
}

fn int_product<T: Scalar>(a: &IntMatrix, b_t: &IntMatrix) -> Result<Matrix<T>> {
    if a.cols() != b_t.cols() {
        return Err(dims("int_product", a.cols(), b_t.cols()));
    }
    let mut out = Vec::with_capacity(a.rows() * b_t.rows());
    for i in 0..a.rows() {
        for j in 0..b_t.rows() {
            let acc: i64 = a
                .row(i)
                .iter()
                .zip(b_t.row(j))
                .map(|(&x, &y)| x as i64 * y as i64)
                .sum();
            out.push(T::lit(acc as f64));
        }
    }
    Matrix::from_vec(a.rows(), b_t.rows(), out)
}

/// `L = (s_q s_k / sqrt(d)) Q~ K~^T` from integer operands.
pub fn scaled_logits<T: Scalar>(qt: &IntMatrix, kt: &IntMatrix, s: &ScaleTuple<T>) -> Result<Matrix<T>> {
    let t_eff = effective_temperature(s)?;
    Ok(int_product::<T>(qt, kt)?.scale(T::one() / t_eff))
}

/// Energy path `Z = s_o Concat_h(s_v A_h V~_h) W~_o` with integer values and
/// output weights.
pub fn energy_path<T: Scalar>(
    attention: &[Matrix<T>],
    values: &[IntMatrix],
    wo_t: &IntMatrix,
    s: &ScaleTuple<T>,
) -> Result<Matrix<T>> {
    s.validate()?;
    if attention.len() != values.len() || attention.is_empty() {
        return Err(dims("energy_path", attention.len(), values.len()));
    }
    let heads = attention
        .iter()
        .zip(values)
        .map(|(a, v)| Ok(matmul(a, &v.to_real())?.scale(s.s_v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(matmul(&Matrix::hcat(&heads)?, &wo_t.to_real())?.scale(s.s_o))
}

/// First-order logit change of one head for an input perturbation `eps_up`:
/// `((eps W_q) K^T + Q (eps W_k)^T) / sqrt(d)`. `w_q` and `w_k` are the
/// head's `model_dim x d` projection columns.
pub fn first_order_logits_delta<T: Scalar>(
    eps_up: &Matrix<T>,
    w_q: &Matrix<T>,
    w_k: &Matrix<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    head_dim: usize,
) -> Result<Matrix<T>> {
    if head_dim == 0 {
        return Err(invalid("first_order_logits_delta", "head dimension must be positive"));
    }
    let dq = matmul(eps_up, w_q)?;
    let dk = matmul(eps_up, w_k)?;
    let a = matmul(&dq, &k.transpose())?;
    let b = matmul(q, &dk.transpose())?;
    Ok(a.add(&b)?.scale(T::one() / T::lit(head_dim as f64).sqrt()))
}

/// Intermediates of a dense self-attention forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTaps<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub logits: Vec<Matrix<T>>,
    pub attention: Vec<Matrix<T>>,
    pub concat: Matrix<T>,
    pub output: Matrix<T>,
}

/// Floating self-attention block used for perturbation analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAttention<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub b_o: Option<Vec<T>>,
    pub heads: usize,
}

impl<T: Scalar> DenseAttention<T> {
    pub fn new(w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>, w_o: Matrix<T>, heads: usize) -> Result<Self> {
        let d = w_q.rows();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(invalid("DenseAttention", "model dimension not divisible by heads"));
        }
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != (d, d) {
                return Err(dims(
                    "DenseAttention",
                    format!("{d}x{d}"),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_o: None,
            heads,
        })
    }

    /// Gaussian block with `N(0, 1/dim)` entries.
    pub fn random(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let mut draw = || Matrix::gaussian(dim, dim, s, &mut rng);
        let (q, k, v, o) = (draw(), draw(), draw(), draw());
        Self::new(q, k, v, o, heads)
    }

    /// Dense copy of a floating attention block; quantized projections are
    /// rejected.
    pub fn from_weights(w: &AttentionWeights<T>) -> Result<Self> {
        let get = |l: &crate::model::Linear<T>| {
            l.float_weight()
                .cloned()
                .ok_or_else(|| invalid("DenseAttention::from_weights", "projection is quantized"))
        };
        let mut out = Self::new(get(&w.w_q)?, get(&w.w_k)?, get(&w.w_v)?, get(&w.w_o)?, w.heads)?;
        out.b_o = w.w_o.bias().map(<[T]>::to_vec);
        Ok(out)
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<DenseTaps<T>> {
        self.forward_with(x, &self.w_o)
    }

    fn forward_with(&self, x: &Matrix<T>, w_o: &Matrix<T>) -> Result<DenseTaps<T>> {
        let (q, k, v) = (matmul(x, &self.w_q)?, matmul(x, &self.w_k)?, matmul(x, &self.w_v)?);
        let d = self.head_dim();
        let inv = T::one() / T::lit(d as f64).sqrt();
        let mut logits = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let l = matmul(&q.col_block(h * d, d), &k.col_block(h * d, d).transpose())?.scale(inv);
            let a = softmax_rows(&l);
            outs.push(matmul(&a, &v.col_block(h * d, d))?);
            logits.push(l);
            attention.push(a);
        }
        let concat = Matrix::hcat(&outs)?;
        let mut output = matmul(&concat, w_o)?;
        if let Some(b) = &self.b_o {
            output = output.add_row_vector(b)?;
        }
        Ok(DenseTaps {
            q,
            k,
            v,
            logits,
            attention,
            concat,
            output,
        })
    }

    /// Per-head first-order logit changes.
    pub fn first_order_logits(&self, taps: &DenseTaps<T>, eps_up: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let d = self.head_dim();
        (0..self.heads)
            .map(|h| {
                first_order_logits_delta(
                    eps_up,
                    &self.w_q.col_block(h * d, d),
                    &self.w_k.col_block(h * d, d),
                    &taps.q.col_block(h * d, d),
                    &taps.k.col_block(h * d, d),
                    d,
                )
            })
            .collect()
    }

    /// First-order output change:
    /// `Concat_h(J(L_h) dL_h V_h + A_h eps W_v,h) W_o + Concat_h(A_h V_h) dW_o`.
    pub fn first_order_output_delta(
        &self,
        taps: &DenseTaps<T>,
        eps_up: &Matrix<T>,
        delta_wo: Option<&Matrix<T>>,
    ) -> Result<Matrix<T>> {
        if eps_up.shape() != taps.q.shape() {
            return Err(dims(
                "first_order_output_delta",
                format!("{}x{}", taps.q.rows(), taps.q.cols()),
                format!("{}x{}", eps_up.rows(), eps_up.cols()),
            ));
        }
        let d = self.head_dim();
        let dl = self.first_order_logits(taps, eps_up)?;
        let dv = matmul(eps_up, &self.w_v)?;
        let mut heads = Vec::with_capacity(self.heads);
        for (h, (a, dl_h)) in taps.attention.iter().zip(&dl).enumerate() {
            let mut da = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let row = softmax_jacobian_apply(a.row(r), dl_h.row(r))?;
                da.row_mut(r).copy_from_slice(&row);
            }
            let term = matmul(&da, &taps.v.col_block(h * d, d))?.add(&matmul(a, &dv.col_block(h * d, d))?)?;
            heads.push(term);
        }
        let mut out = matmul(&Matrix::hcat(&heads)?, &self.w_o)?;
        if let Some(dw) = delta_wo {
            out = out.add(&matmul(&taps.concat, dw)?)?;
        }
        Ok(out)
    }

    /// Exact output change when the input moves by `eps_up` and `W_o` by
    /// `delta_wo`.
    pub fn exact_output_delta(
        &self,
        x: &Matrix<T>,
        eps_up: &Matrix<T>,
        delta_wo: Option<&Matrix<T>>,
    ) -> Result<Matrix<T>> {
        let base = self.forward(x)?;
        let w_o = match delta_wo {
            Some(dw) => self.w_o.add(dw)?,
            None => self.w_o.clone(),
        };
        let moved = self.forward_with(&x.add(eps_up)?, &w_o)?;
        moved.output.sub(&base.output)
    }
}

/// Default perturbation scales: `1e-1 ... 1e-4` in half-decade steps.
pub fn default_scales() -> Vec<f64> {
    (0..=6).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub scale: f64,
    /// `||dO_exact - dO_pred||_F`
    pub residual: f64,
    /// `||dO_pred||_F`
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log residual` against `log scale`; `None` when
    /// any residual is zero.
    pub slope: Option<f64>,
}

fn log_log_slope(rows: &[ConvergenceRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.residual > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.scale.ln(), r.residual.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// For each scale `c`, compares the exact output change at
/// `(c eps_base, c delta_wo_base)` with the first-order prediction.
pub fn convergence_check<T: Scalar>(
    block: &DenseAttention<T>,
    x: &Matrix<T>,
    eps_base: &Matrix<T>,
    delta_wo_base: Option<&Matrix<T>>,
    scales: &[f64],
) -> Result<ConvergenceTable> {
    if scales.iter().any(|&s| !(s > 0.0)) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("convergence_check", "scales must be positive and decreasing"));
    }
    let taps = block.forward(x)?;
    let mut rows = Vec::with_capacity(scales.len());
    for &c in scales {
        let cs = T::lit(c);
        let eps = eps_base.scale(cs);
        let dw = delta_wo_base.map(|m| m.scale(cs));
        let pred = block.first_order_output_delta(&taps, &eps, dw.as_ref())?;
        let exact = block.exact_output_delta(x, &eps, dw.as_ref())?;
        rows.push(ConvergenceRow {
            scale: c,
            residual: exact.sub(&pred)?.frobenius_norm().to_f64_lossy(),
            predicted: pred.frobenius_norm().to_f64_lossy(),
        });
    }
    let slope = log_log_slope(&rows);
    Ok(ConvergenceTable { rows, slope })
}

/// Convergence study on the first attention block of a stack: the block's
/// own normalized input for the first buffer sample, a seeded unit Gaussian
/// input perturbation, and a seeded `N(0, 1/D)` output-weight perturbation.
pub fn stack_convergence<T: Scalar>(
    stack: &PolicyStack<T>,
    buffer: &[CalibSample<T>],
    scales: &[f64],
    seed: u64,
) -> Result<ConvergenceTable> {
    let sample = buffer.first().ok_or(Error::Empty {
        op: "stack_convergence",
    })?;
    let block = stack
        .global_block(0)
        .ok_or_else(|| invalid("stack_convergence", "stack has no attention blocks"))?;
    let dense = DenseAttention::from_weights(&block.attn)?;
    let x = block.ln1.forward(&sample.tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = dense.model_dim();
    let eps = Matrix::gaussian(x.rows(), dim, 1.0, &mut rng);
    let dw = Matrix::gaussian(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
    convergence_check(&dense, &x, &eps, Some(&dw), scales)
}

/// Per-block curves for one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetric {
    pub block: usize,
    pub part: Part,
    /// Logit Std pooled over heads.
    pub teacher_logit_std: f64,
    pub student_logit_std: f64,
    pub calibrated_logit_std: f64,
    pub teacher_head_std: Vec<f64>,
    pub student_head_std: Vec<f64>,
    pub calibrated_head_std: Vec<f64>,
    pub teacher_z_rms: f64,
    pub student_z_rms: f64,
    pub calibrated_z_rms: f64,
}

impl BlockMetric {
    pub fn raw_std_gap(&self) -> f64 {
        (self.student_logit_std - self.teacher_logit_std).abs()
    }

    pub fn calibrated_std_gap(&self) -> f64 {
        (self.calibrated_logit_std - self.teacher_logit_std).abs()
    }

    /// `|log(RMS_student / RMS_teacher)|`
    pub fn raw_log_rms_gap(&self) -> f64 {
        (self.student_z_rms / self.teacher_z_rms).ln().abs()
    }

    pub fn calibrated_log_rms_gap(&self) -> f64 {
        (self.calibrated_z_rms / self.teacher_z_rms).ln().abs()
    }
}

/// Relative final-latent divergence `||x_0^Q - x_0^T|| / ||x_0^T||`, pooled
/// over the buffer, with per-sample values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutDivergence {
    pub steps: usize,
    pub student: f64,
    pub calibrated: f64,
    pub student_per_sample: Vec<f64>,
    pub calibrated_per_sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub blocks: Vec<BlockMetric>,
    pub rollout: RolloutDivergence,
    pub convergence: Option<ConvergenceTable>,
}

fn final_latents<T: Scalar>(stack: &PolicyStack<T>, buffer: &[CalibSample<T>], steps: usize) -> Result<Vec<Matrix<T>>> {
    buffer
        .iter()
        .map(|s| {
            let f = stack.llm_forward(&s.tokens, None)?;
            stack.rollout(&s.latent, &f, steps, None)
        })
        .collect()
}

fn divergence<T: Scalar>(reference: &[Matrix<T>], other: &[Matrix<T>]) -> Result<(f64, Vec<f64>)> {
    let (mut num, mut den) = (0.0, 0.0);
    let mut per = Vec::with_capacity(reference.len());
    for (r, o) in reference.iter().zip(other) {
        let d = o.sub(r)?.frobenius_norm().to_f64_lossy();
        let n = r.frobenius_norm().to_f64_lossy();
        num += d * d;
        den += n * n;
        per.push(if n > 0.0 { d / n } else { d });
    }
    let pooled = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok((pooled, per))
}

/// Logit Std and output RMS per attention block for a teacher, a raw
/// student and a calibrated student, measured under teacher forcing on the
/// buffer, plus free-running rollout divergence from the teacher.
pub fn block_metrics<T: Scalar>(
    teacher: &PolicyStack<T>,
    student: &PolicyStack<T>,
    calibrated: &PolicyStack<T>,
    buffer: &[CalibSample<T>],
) -> Result<DriftReport> {
    teacher.check_compatible(student)?;
    teacher.check_compatible(calibrated)?;
    let forcing = TeacherForcing::new(teacher, buffer)?;
    let pt = forcing.profile(teacher, buffer, None)?;
    let ps = forcing.profile(student, buffer, None)?;
    let pc = forcing.profile(calibrated, buffer, None)?;
    let cfg = &teacher.config;
    let std_of = |m: &crate::calibration::Moments| m.std().unwrap_or(0.0);
    let rms_of = |m: &crate::calibration::Moments| m.rms().unwrap_or(0.0);
    let heads = |p: &crate::calibration::BlockProfile| p.logits.iter().map(std_of).collect::<Vec<_>>();
    let blocks = (0..cfg.attention_blocks())
        .map(|b| BlockMetric {
            block: b,
            part: cfg.part_of(b),
            teacher_logit_std: std_of(&pt[b].pooled_logits()),
            student_logit_std: std_of(&ps[b].pooled_logits()),
            calibrated_logit_std: std_of(&pc[b].pooled_logits()),
            teacher_head_std: heads(&pt[b]),
            student_head_std: heads(&ps[b]),
            calibrated_head_std: heads(&pc[b]),
            teacher_z_rms: rms_of(&pt[b].z),
            student_z_rms: rms_of(&ps[b].z),
            calibrated_z_rms: rms_of(&pc[b].z),
        })
        .collect();

    let steps = cfg.denoise_steps;
    let xt = final_latents(teacher, buffer, steps)?;
    let (student_div, student_per) = divergence(&xt, &final_latents(student, buffer, steps)?)?;
    let (cal_div, cal_per) = divergence(&xt, &final_latents(calibrated, buffer, steps)?)?;
    Ok(DriftReport {
        blocks,
        rollout: RolloutDivergence {
            steps,
            student: student_div,
            calibrated: cal_div,
            student_per_sample: student_per,
            calibrated_per_sample: cal_per,
        },
        convergence: None,
    })
}
