//! JSON reports and their tidy CSV export.
//!
//! CSV columns are fixed: `section,block,metric,value`. `block` is empty for
//! stack-wide values; for convergence rows it is the sweep index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vlaquant::drift::{BlockMetric, ConvergenceTable, RolloutDivergence};
use vlaquant::Scalars;

use crate::error::{CliError, CliResult};
use crate::memory::MemoryEstimate;

pub const CSV_HEADER: &str = "section,block,metric,value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSection {
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<RolloutDivergence>,
    /// Final latent, row-major by action row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_latent: Option<Vec<Vec<f64>>>,
    /// Frobenius norm of the latent after each step, starting with the
    /// initial latent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_norms: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: Value,
    pub memory: Option<MemoryEstimate>,
    pub scalars: Option<Scalars>,
    pub blocks: Vec<BlockMetric>,
    pub rollout: Option<RolloutSection>,
    pub convergence: Option<ConvergenceTable>,
}

impl Report {
    pub fn new(config: Value) -> Self {
        Self {
            config,
            memory: None,
            scalars: None,
            blocks: Vec::new(),
            rollout: None,
            convergence: None,
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Validation(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("report: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |section: &str, block: Option<usize>, metric: &str, value: f64| {
            let b = block.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{section},{b},{metric},{value}");
        };
        if let Some(m) = &self.memory {
            row("memory", None, "float_bytes", m.float_bytes as f64);
            row("memory", None, "quant_bytes", m.quant_bytes as f64);
            row("memory", None, "relative_savings", m.relative_savings);
        }
        if let Some(s) = &self.scalars {
            for (b, (alpha, beta)) in s.alpha.iter().zip(&s.beta).enumerate() {
                for (h, a) in alpha.iter().enumerate() {
                    row("scalars", Some(b), &format!("alpha.{h}"), *a);
                }
                row("scalars", Some(b), "beta", *beta);
            }
        }
        for b in &self.blocks {
            let i = Some(b.block);
            row("blocks", i, "teacher_logit_std", b.teacher_logit_std);
            row("blocks", i, "student_logit_std", b.student_logit_std);
            row("blocks", i, "calibrated_logit_std", b.calibrated_logit_std);
            row("blocks", i, "teacher_z_rms", b.teacher_z_rms);
            row("blocks", i, "student_z_rms", b.student_z_rms);
            row("blocks", i, "calibrated_z_rms", b.calibrated_z_rms);
        }
        if let Some(r) = &self.rollout {
            row("rollout", None, "steps", r.steps as f64);
            if let Some(d) = &r.divergence {
                row("rollout", None, "student_divergence", d.student);
                row("rollout", None, "calibrated_divergence", d.calibrated);
            }
            if let Some(n) = &r.step_norms {
                for (i, v) in n.iter().enumerate() {
                    row("rollout", Some(i), "latent_norm", *v);
                }
            }
        }
        if let Some(c) = &self.convergence {
            for (i, r) in c.rows.iter().enumerate() {
                row("convergence", Some(i), "scale", r.scale);
                row("convergence", Some(i), "residual", r.residual);
                row("convergence", Some(i), "predicted", r.predicted);
            }
            if let Some(s) = c.slope {
                row("convergence", None, "slope", s);
            }
        }
        out
    }
}

/// Combines reports: `config` lists every source configuration; every other
/// section comes from the first report that has it.
pub fn merge(reports: &[Report]) -> CliResult<Report> {
    if reports.is_empty() {
        return Err(CliError::Usage("no reports to merge".into()));
    }
    let mut out = Report::new(serde_json::json!({
        "sources": reports.iter().map(|r| r.config.clone()).collect::<Vec<_>>(),
    }));
    for r in reports {
        if out.memory.is_none() {
            out.memory.clone_from(&r.memory);
        }
        if out.scalars.is_none() {
            out.scalars.clone_from(&r.scalars);
        }
        if out.blocks.is_empty() {
            out.blocks.clone_from(&r.blocks);
        }
        if out.rollout.is_none() {
            out.rollout.clone_from(&r.rollout);
        }
        if out.convergence.is_none() {
            out.convergence.clone_from(&r.convergence);
        }
    }
    Ok(out)
}
