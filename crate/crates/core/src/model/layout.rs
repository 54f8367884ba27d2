use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CalibSample, Linear, Part, PolicyStack, Probe, Proj, Site};
use crate::duquant::{build_factorization, FactorizationConfig};
use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;
use crate::quantizer::{make_activation_qparams, quantize_weights_per_channel, range_of_pool, QuantSpec};
use crate::scalar::Scalar;

/// Per-layer precision assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Layout {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "dit")]
    Dit,
    #[serde(rename = "llm+dit")]
    LlmDit,
    /// Every language linear plus the diffusion MLPs; diffusion attention
    /// projections stay in floating point.
    #[serde(rename = "llm+dit-mlp")]
    LlmDitMlp,
}

impl Layout {
    pub const ALL: [Layout; 5] = [
        Layout::None,
        Layout::Llm,
        Layout::Dit,
        Layout::LlmDit,
        Layout::LlmDitMlp,
    ];

    pub fn quantizes(self, site: Site) -> bool {
        match self {
            Layout::None => false,
            Layout::Llm => site.part == Part::Llm,
            Layout::Dit => site.part == Part::Dit,
            Layout::LlmDit => true,
            Layout::LlmDitMlp => site.part == Part::Llm || !site.proj.is_attention(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Layout::None => "none",
            Layout::Llm => "llm",
            Layout::Dit => "dit",
            Layout::LlmDit => "llm+dit",
            Layout::LlmDitMlp => "llm+dit-mlp",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLayoutError(pub String);

impl fmt::Display for ParseLayoutError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown layout '{}' (expected none, llm, dit, llm+dit, llm+dit-mlp)",
            self.0
        )
    }
}

impl std::error::Error for ParseLayoutError {}

impl FromStr for Layout {
    type Err = ParseLayoutError;

    /// Accepts the lowercase names and the upper-case table labels
    /// (`LLM+DIT_MLP`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Layout::ALL
            .into_iter()
            .find(|l| l.as_str() == norm)
            .ok_or_else(|| ParseLayoutError(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub spec: QuantSpec,
    pub factorization: FactorizationConfig,
}

struct SiteCollector<'a, T> {
    wanted: &'a dyn Fn(Site) -> bool,
    inputs: BTreeMap<Site, Vec<Matrix<T>>>,
}

impl<T: Scalar> Probe<T> for SiteCollector<'_, T> {
    fn linear_input(&mut self, site: Site, x: &Matrix<T>) {
        if (self.wanted)(site) {
            self.inputs.entry(site).or_default().push(x.clone());
        }
    }
}

/// Inputs seen by each wanted linear site while `stack` runs the buffer:
/// the language trunk on every sample's tokens, then a full rollout of the
/// configured length from the sample's latent.
pub fn collect_site_inputs<T: Scalar>(
    stack: &PolicyStack<T>,
    buffer: &[CalibSample<T>],
    wanted: &dyn Fn(Site) -> bool,
) -> Result<BTreeMap<Site, Vec<Matrix<T>>>> {
    let mut probe = SiteCollector {
        wanted,
        inputs: BTreeMap::new(),
    };
    for sample in buffer {
        let f_vl = stack.llm_forward_probed(&sample.tokens, None, &mut probe)?;
        let mut x = sample.latent.clone();
        for t in (1..=stack.config.denoise_steps).rev() {
            x = stack.denoise_step_probed(&x, &f_vl, t, None, &mut probe)?;
        }
    }
    Ok(probe.inputs)
}

fn site_ordinal(site: Site) -> u64 {
    let part = match site.part {
        Part::Llm => 0,
        Part::Dit => 1,
    };
    let proj = Proj::ALL.iter().position(|&p| p == site.proj).unwrap_or(0) as u64;
    (part << 32) | ((site.block as u64) << 8) | proj
}

/// Quantizes every linear the layout selects.
///
/// For each selected site the teacher's pooled calibration inputs give the
/// smoothing statistics for its factorization; the transformed inputs give
/// the static activation range, and the folded weights are quantized per
/// output channel.
pub fn apply_layout<T: Scalar>(
    teacher: &PolicyStack<T>,
    layout: Layout,
    cfg: &LayoutConfig,
    buffer: &[CalibSample<T>],
) -> Result<PolicyStack<T>> {
    cfg.spec.validate()?;
    let mut out = teacher.clone();
    out.layout = layout;
    let selected: Vec<Site> = teacher.sites().into_iter().filter(|&s| layout.quantizes(s)).collect();
    if selected.is_empty() {
        return Ok(out);
    }
    if buffer.is_empty() {
        return Err(Error::Empty { op: "apply_layout" });
    }
    if selected
        .iter()
        .any(|&s| teacher.linear(s).is_some_and(Linear::is_quantized))
    {
        return Err(invalid("apply_layout", "teacher already contains quantized layers"));
    }
    let inputs = collect_site_inputs(teacher, buffer, &|s| layout.quantizes(s))?;

    for site in selected {
        let samples = inputs
            .get(&site)
            .ok_or_else(|| invalid("apply_layout", format!("no calibration inputs for {}", site.name())))?;
        let (weight, bias) = match teacher.linear(site) {
            Some(Linear::Float { weight, bias }) => (weight, bias.clone()),
            _ => {
                return Err(invalid(
                    "apply_layout",
                    format!("missing floating layer {}", site.name()),
                ))
            }
        };
        let mut colmax = vec![T::zero(); weight.rows()];
        for m in samples {
            for (c, v) in colmax.iter_mut().zip(m.col_abs_max()) {
                *c = c.max(v);
            }
        }
        let fcfg = FactorizationConfig {
            seed: cfg.factorization.seed.wrapping_add(site_ordinal(site)),
            ..cfg.factorization
        };
        let factorization = build_factorization(&colmax, weight, &fcfg)?;
        let mut pool = Vec::new();
        for m in samples {
            pool.extend_from_slice(factorization.apply_activation_side(m)?.as_slice());
        }
        let (lo, hi) = range_of_pool(&mut pool, cfg.spec.percentile)?;
        let qparams = make_activation_qparams(lo, hi, cfg.spec.act_bits)?;
        let mut layer = quantize_weights_per_channel(&factorization.fold_weight_side(weight)?, cfg.spec.weight_bits)?;
        layer.bias = bias;
        layer.act_qparams = Some(qparams);
        layer.folded_note = format!(
            "duquant(alpha={}, block={}, mode={:?})",
            fcfg.alpha, factorization.block_size, fcfg.mode
        );
        *out.linear_mut(site).expect("site exists") = Linear::Quant { factorization, layer };
    }
    Ok(out)
}
