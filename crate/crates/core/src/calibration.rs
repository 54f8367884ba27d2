//! Teacher/student statistics and the attention scalars derived from them.
//!
//! Two families of scalars are estimated from an unlabeled buffer:
//!
//! * a per-head logit gain `alpha = Std(L_T) / (Std(L_Q) + 1e-6)` that
//!   restores the teacher's logit dispersion, and
//! * a per-block output gain `beta = RMS(Z_T) / (RMS(Z_Q) + 1e-6)` that
//!   restores the energy the attention output injects into the residual
//!   stream.
//!
//! Both are clipped to `[e^-c, e^c]` and snapped to exactly 1 when
//! `|log s| < eps`. They are then folded into the weights (or the
//! dequantization scales of quantized layers), so inference runs with
//! neutral runtime scalars.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{BlockTaps, CalibSample, Gains, ModelConfig, Part, PolicyStack, Probe};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Denominator guard in the scalar ratios.
pub const RATIO_GUARD: f64 = 1e-6;
pub const DEFAULT_CLIP: f64 = 0.4;
pub const DEFAULT_BAND: f64 = 0.03;

/// Additive first and second moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: u64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
        self.count += 1;
    }

    pub fn extend<T: Scalar>(&mut self, m: &Matrix<T>) {
        for &v in m.as_slice() {
            self.push(v.to_f64_lossy());
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    /// Population standard deviation.
    pub fn std(&self) -> Option<f64> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            let mean = self.sum / n;
            (self.sum_sq / n - mean * mean).max(0.0).sqrt()
        })
    }

    pub fn rms(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }
}

/// Logit moments per head and output-energy moments of one attention block,
/// for one stack.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub logits: Vec<Moments>,
    pub z: Moments,
}

impl BlockProfile {
    /// Logit moments pooled over heads.
    pub fn pooled_logits(&self) -> Moments {
        let mut m = Moments::default();
        for h in &self.logits {
            m.merge(h);
        }
        m
    }

    pub fn merge(&mut self, other: &BlockProfile) -> Result<()> {
        if self.logits.len() != other.logits.len() {
            return Err(Error::Structure("head counts differ".into()));
        }
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            a.merge(b);
        }
        self.z.merge(&other.z);
        Ok(())
    }
}

struct ProfileProbe {
    blocks: Vec<BlockProfile>,
}

impl<T: Scalar> Probe<T> for ProfileProbe {
    fn block_taps(&mut self, block: usize, taps: &BlockTaps<T>) {
        let p = &mut self.blocks[block];
        for (m, l) in p.logits.iter_mut().zip(&taps.logits) {
            m.extend(l);
        }
        p.z.extend(&taps.z);
    }
}

/// Teacher latent trajectories over a buffer. Students are evaluated on the
/// teacher's latents at every step, so the inputs reaching the first
/// diffusion block match the teacher's exactly.
#[derive(Debug, Clone)]
pub struct TeacherForcing<T> {
    steps: usize,
    trajectories: Vec<Vec<Matrix<T>>>,
}

impl<T: Scalar> TeacherForcing<T> {
    pub fn new(teacher: &PolicyStack<T>, buffer: &[CalibSample<T>]) -> Result<Self> {
        if buffer.is_empty() {
            return Err(Error::Empty {
                op: "TeacherForcing::new",
            });
        }
        let steps = teacher.config.denoise_steps;
        let trajectories = buffer
            .iter()
            .map(|s| {
                let f = teacher.llm_forward(&s.tokens, None)?;
                teacher.trajectory(&s.latent, &f, steps, None)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { steps, trajectories })
    }

    /// Pooled per-block statistics of `stack` over the buffer. The language
    /// trunk runs on the sample tokens; the diffusion head runs one step at
    /// each teacher latent, conditioned on `stack`'s own trunk output.
    pub fn profile(
        &self,
        stack: &PolicyStack<T>,
        buffer: &[CalibSample<T>],
        gains: Option<&Gains<'_, T>>,
    ) -> Result<Vec<BlockProfile>> {
        if buffer.len() != self.trajectories.len() {
            return Err(Error::Structure("buffer does not match teacher trajectories".into()));
        }
        let cfg = &stack.config;
        let mut probe = ProfileProbe {
            blocks: vec![
                BlockProfile {
                    logits: vec![Moments::default(); cfg.heads],
                    z: Moments::default(),
                };
                cfg.attention_blocks()
            ],
        };
        for (sample, traj) in buffer.iter().zip(&self.trajectories) {
            let f_vl = stack.llm_forward_probed(&sample.tokens, gains, &mut probe)?;
            for (i, t) in (1..=self.steps).rev().enumerate() {
                stack.denoise_step_probed(&traj[i], &f_vl, t, gains, &mut probe)?;
            }
        }
        Ok(probe.blocks)
    }
}

/// Statistics of one attention block for the teacher and the student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub part: Part,
    pub teacher: BlockProfile,
    pub student: BlockProfile,
}

/// Per-block, per-head moments captured on the calibration buffer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatTable {
    pub blocks: Vec<BlockStats>,
}

impl StatTable {
    pub fn from_profiles(cfg: &ModelConfig, teacher: Vec<BlockProfile>, student: Vec<BlockProfile>) -> Result<Self> {
        if teacher.len() != student.len() || teacher.len() != cfg.attention_blocks() {
            return Err(Error::Structure("profile lengths differ".into()));
        }
        Ok(Self {
            blocks: teacher
                .into_iter()
                .zip(student)
                .enumerate()
                .map(|(b, (teacher, student))| BlockStats {
                    part: cfg.part_of(b),
                    teacher,
                    student,
                })
                .collect(),
        })
    }

    /// Field-wise addition.
    pub fn merge(&mut self, other: &StatTable) -> Result<()> {
        if self.blocks.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Structure("block counts differ".into()));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.teacher.merge(&b.teacher)?;
            a.student.merge(&b.student)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Diffusion-head blocks only.
    #[default]
    Dit,
    All,
}

impl Scope {
    pub fn includes(self, part: Part) -> bool {
        match self {
            Scope::Dit => part == Part::Dit,
            Scope::All => true,
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dit" | "dit_only" | "dit-only" => Ok(Scope::Dit),
            "all" => Ok(Scope::All),
            other => Err(format!("unknown scope '{other}' (expected dit or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    /// Limit `c` on `|log s|`.
    pub clip: f64,
    /// Neutrality band on `|log s|`.
    pub band: f64,
    pub atm: bool,
    pub ohb: bool,
    pub atm_scope: Scope,
    pub beta_scope: Scope,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            clip: DEFAULT_CLIP,
            band: DEFAULT_BAND,
            atm: true,
            ohb: true,
            atm_scope: Scope::Dit,
            beta_scope: Scope::Dit,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(invalid("CalibConfig", "clip limit must be positive"));
        }
        if !(self.band >= 0.0) || !self.band.is_finite() {
            return Err(invalid("CalibConfig", "band must be nonnegative"));
        }
        Ok(())
    }
}

/// Folded attention scalars, indexed by global attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CalibScalars<T> {
    pub alpha: Vec<Vec<T>>,
    pub beta: Vec<T>,
    /// Ratios before clipping and banding; reported for every block, in
    /// scope or not.
    pub alpha_raw: Vec<Vec<f64>>,
    pub beta_raw: Vec<f64>,
    pub config: CalibConfig,
}

impl<T: Scalar> CalibScalars<T> {
    pub fn neutral(cfg: &ModelConfig, config: CalibConfig) -> Self {
        let n = cfg.attention_blocks();
        Self {
            alpha: vec![vec![T::one(); cfg.heads]; n],
            beta: vec![T::one(); n],
            alpha_raw: vec![vec![1.0; cfg.heads]; n],
            beta_raw: vec![1.0; n],
            config,
        }
    }

    pub fn gains(&self) -> Gains<'_, T> {
        Gains {
            alpha: &self.alpha,
            beta: &self.beta,
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.alpha.iter().flatten().all(|&a| a == T::one()) && self.beta.iter().all(|&b| b == T::one())
    }
}

/// Ratio, clip and band for one scalar. Returns `(raw, final)`.
pub fn match_scalar(teacher: f64, student: f64, clip: f64, band: f64) -> (f64, f64) {
    let raw = teacher / (student + RATIO_GUARD);
    let clipped = raw.clamp((-clip).exp(), clip.exp());
    let value = if clipped.ln().abs() < band { 1.0 } else { clipped };
    (raw, value)
}

/// Logit gain from teacher and student logit standard deviations.
pub fn atm_scalar(std_teacher: f64, std_student: f64, clip: f64, band: f64) -> (f64, f64) {
    match_scalar(std_teacher, std_student, clip, band)
}

/// Output gain from teacher and student output RMS.
pub fn ohb_scalar(rms_teacher: f64, rms_student: f64, clip: f64, band: f64) -> (f64, f64) {
    match_scalar(rms_teacher, rms_student, clip, band)
}

/// Per-block, per-head values.
pub type HeadTable = Vec<Vec<f64>>;

/// Per-head logit gains for every block: `(final, raw)`.
pub fn compute_atm(stats: &StatTable, clip: f64, band: f64) -> Result<(HeadTable, HeadTable)> {
    let mut finals = Vec::with_capacity(stats.blocks.len());
    let mut raws = Vec::with_capacity(stats.blocks.len());
    for b in &stats.blocks {
        let (mut f, mut r) = (Vec::new(), Vec::new());
        for (t, s) in b.teacher.logits.iter().zip(&b.student.logits) {
            let (Some(st), Some(sq)) = (t.std(), s.std()) else {
                return Err(invalid("compute_atm", "zero sample count"));
            };
            let (raw, value) = atm_scalar(st, sq, clip, band);
            r.push(raw);
            f.push(value);
        }
        finals.push(f);
        raws.push(r);
    }
    Ok((finals, raws))
}

/// Per-block output gains: `(final, raw)`.
pub fn compute_ohb(stats: &StatTable, clip: f64, band: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut finals = Vec::with_capacity(stats.blocks.len());
    let mut raws = Vec::with_capacity(stats.blocks.len());
    for b in &stats.blocks {
        let (Some(rt), Some(rq)) = (b.teacher.z.rms(), b.student.z.rms()) else {
            return Err(invalid("compute_ohb", "zero sample count"));
        };
        let (raw, value) = ohb_scalar(rt, rq, clip, band);
        raws.push(raw);
        finals.push(value);
    }
    Ok((finals, raws))
}

/// Runs teacher and student over the buffer with neutral scalars and
/// accumulates logit and output moments per block.
pub fn capture_statistics<T: Scalar>(
    teacher: &PolicyStack<T>,
    student: &PolicyStack<T>,
    buffer: &[CalibSample<T>],
) -> Result<StatTable> {
    teacher.check_compatible(student)?;
    let forcing = TeacherForcing::new(teacher, buffer)?;
    let t = forcing.profile(teacher, buffer, None)?;
    let s = forcing.profile(student, buffer, None)?;
    StatTable::from_profiles(&teacher.config, t, s)
}

/// Folds the scalars into the student: for head `h` of block `b` the
/// output channels of `W_q` feeding that head are multiplied by
/// `alpha[b][h]`; `W_o` and `b_o` of block `b` are multiplied by `beta[b]`.
/// On quantized projections the dequantization scales absorb the factor.
pub fn fold_scalars<T: Scalar>(student: &PolicyStack<T>, s: &CalibScalars<T>) -> Result<PolicyStack<T>> {
    let cfg = student.config;
    let n = cfg.attention_blocks();
    if s.alpha.len() != n || s.beta.len() != n || s.alpha.iter().any(|a| a.len() != cfg.heads) {
        return Err(Error::Structure("scalar table does not match the stack".into()));
    }
    if s.alpha.iter().flatten().chain(&s.beta).any(|&v| !(v > T::zero())) {
        return Err(invalid("fold_scalars", "scalars must be positive"));
    }
    let mut out = student.clone();
    let d = cfg.head_dim();
    for b in 0..n {
        let block = out.global_block_mut(b).expect("block index in range");
        for (h, &a) in s.alpha[b].iter().enumerate() {
            if a != T::one() {
                block.attn.w_q.scale_output_channels(h * d, d, a)?;
            }
        }
        if s.beta[b] != T::one() {
            block.attn.w_o.scale_output_channels(0, cfg.model_dim, s.beta[b])?;
        }
    }
    Ok(out)
}

/// Capture, estimate both scalar families within their scopes, and fold.
pub fn calibrate_pipeline<T: Scalar>(
    teacher: &PolicyStack<T>,
    student: &PolicyStack<T>,
    buffer: &[CalibSample<T>],
    cfg: &CalibConfig,
) -> Result<(PolicyStack<T>, CalibScalars<T>, StatTable)> {
    cfg.validate()?;
    let stats = capture_statistics(teacher, student, buffer)?;
    let (alpha, alpha_raw) = compute_atm(&stats, cfg.clip, cfg.band)?;
    let (beta, beta_raw) = compute_ohb(&stats, cfg.clip, cfg.band)?;
    let mut scalars = CalibScalars::<T>::neutral(&student.config, *cfg);
    scalars.alpha_raw = alpha_raw;
    scalars.beta_raw = beta_raw;
    for (b, block) in stats.blocks.iter().enumerate() {
        if cfg.atm && cfg.atm_scope.includes(block.part) {
            scalars.alpha[b] = alpha[b].iter().map(|&a| T::lit(a)).collect();
        }
        if cfg.ohb && cfg.beta_scope.includes(block.part) {
            scalars.beta[b] = T::lit(beta[b]);
        }
    }
    let folded = fold_scalars(student, &scalars)?;
    Ok((folded, scalars, stats))
}
