//! Mapping between policy stacks / calibration buffers and containers.
//!
//! Floating tensors are stored as `f32`, integer weight grids as `i8`.
//! Quantized layers store their smoothing vector and permutation as tensors;
//! rotation blocks are regenerated from the recorded seed on load.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vlaquant::duquant::FactorizationMode;
use vlaquant::model::{Block, LayerNorm, Linear, Part, Proj};
use vlaquant::numerics::Permutation;
use vlaquant::quantizer::ActivationQParams;
use vlaquant::{
    DuQuantFactorization, IntMatrix, Layout, Matrix, ModelConfig, QuantSpec, QuantizedLinear, Sample, Scalars, Stack,
};

use crate::container::{Container, TensorData};
use crate::error::{CliError, CliResult};

pub const KIND_CHECKPOINT: &str = "checkpoint";
pub const KIND_BUFFER: &str = "buffer";

/// Everything about a quantized layer that is not a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub weight_bits: u32,
    pub act_delta: f64,
    pub act_zero_point: i32,
    pub act_bits: u32,
    pub block_size: usize,
    pub smoothing_alpha: f64,
    pub rotation_seed: u64,
    pub mode: FactorizationMode,
    pub note: String,
}

/// Checkpoint metadata written next to the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub config: ModelConfig,
    pub layout: Layout,
    pub quant_spec: Option<QuantSpec>,
    pub scalars: Option<Scalars>,
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn push_matrix(c: &mut Container, name: &str, m: &Matrix<f64>) -> CliResult<()> {
    c.push(name, vec![m.rows(), m.cols()], TensorData::F32(to_f32(m.as_slice())))
}

fn push_vec(c: &mut Container, name: &str, v: &[f64]) -> CliResult<()> {
    c.push(name, vec![v.len()], TensorData::F32(to_f32(v)))
}

fn read_matrix(c: &Container, name: &str, rows: usize, cols: usize) -> CliResult<Matrix<f64>> {
    let (shape, data) = c.f32(name)?;
    if shape != [rows, cols] {
        return Err(validation(format!(
            "tensor {name}: expected shape [{rows}, {cols}], found {shape:?}"
        )));
    }
    Ok(Matrix::from_vec(rows, cols, data.iter().map(|&x| x as f64).collect())?)
}

fn read_vec(c: &Container, name: &str, len: usize) -> CliResult<Vec<f64>> {
    let (shape, data) = c.f32(name)?;
    if shape != [len] {
        return Err(validation(format!(
            "tensor {name}: expected shape [{len}], found {shape:?}"
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(validation(format!("tensor {name}: non-finite entry")));
    }
    Ok(data.iter().map(|&x| x as f64).collect())
}

fn push_linear(
    c: &mut Container,
    layers: &mut BTreeMap<String, LayerMeta>,
    name: &str,
    lin: &Linear<f64>,
) -> CliResult<()> {
    match lin {
        Linear::Float { weight, bias } => {
            push_matrix(c, &format!("{name}.weight"), weight)?;
            if let Some(b) = bias {
                push_vec(c, &format!("{name}.bias"), b)?;
            }
        }
        Linear::Quant { factorization, layer } => {
            if layer.weight_bits > 8 {
                return Err(validation(format!(
                    "{name}: {}-bit weights do not fit the 8-bit container grid",
                    layer.weight_bits
                )));
            }
            let q = layer
                .act_qparams
                .ok_or_else(|| validation(format!("{name}: quantized layer without activation parameters")))?;
            let w = &layer.int_weights;
            let ints = w.as_slice().iter().map(|&v| v as i8).collect();
            c.push(
                format!("{name}.qweight"),
                vec![w.rows(), w.cols()],
                TensorData::I8(ints),
            )?;
            push_vec(c, &format!("{name}.scales"), &layer.channel_scales)?;
            if let Some(b) = &layer.bias {
                push_vec(c, &format!("{name}.bias"), b)?;
            }
            push_vec(c, &format!("{name}.lambda"), &factorization.lambda)?;
            let perm: Vec<f64> = factorization.perm.mapping().iter().map(|&p| p as f64).collect();
            push_vec(c, &format!("{name}.perm"), &perm)?;
            layers.insert(
                name.to_string(),
                LayerMeta {
                    weight_bits: layer.weight_bits,
                    act_delta: q.delta,
                    act_zero_point: q.zero_point,
                    act_bits: q.bits,
                    block_size: factorization.block_size,
                    smoothing_alpha: factorization.smoothing_alpha,
                    rotation_seed: factorization.seed,
                    mode: factorization.mode,
                    note: layer.folded_note.clone(),
                },
            );
        }
    }
    Ok(())
}

fn read_linear(
    c: &Container,
    layers: &BTreeMap<String, LayerMeta>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    has_bias: bool,
) -> CliResult<Linear<f64>> {
    let bias_name = format!("{name}.bias");
    let bias = if has_bias || c.get(&bias_name).is_some() {
        Some(read_vec(c, &bias_name, out_dim)?)
    } else {
        None
    };
    let Some(meta) = layers.get(name) else {
        let weight = read_matrix(c, &format!("{name}.weight"), in_dim, out_dim)?;
        return Ok(Linear::float(weight, bias));
    };
    let (shape, ints) = c.i8(&format!("{name}.qweight"))?;
    if shape != [in_dim, out_dim] {
        return Err(validation(format!("{name}.qweight: unexpected shape {shape:?}")));
    }
    let int_weights = IntMatrix::from_vec(in_dim, out_dim, ints.iter().map(|&v| v as i32).collect())?;
    let act = ActivationQParams {
        delta: meta.act_delta,
        zero_point: meta.act_zero_point,
        bits: meta.act_bits,
    };
    act.validate()?;
    let layer = QuantizedLinear {
        int_weights,
        channel_scales: read_vec(c, &format!("{name}.scales"), out_dim)?,
        weight_bits: meta.weight_bits,
        bias,
        act_qparams: Some(act),
        folded_note: meta.note.clone(),
    };
    let lambda = read_vec(c, &format!("{name}.lambda"), in_dim)?;
    let perm = read_vec(c, &format!("{name}.perm"), in_dim)?;
    if perm.iter().any(|&p| p < 0.0 || p.fract() != 0.0) {
        return Err(validation(format!("{name}.perm: entries must be channel indices")));
    }
    let perm = Permutation::new(perm.iter().map(|&p| p as usize).collect())?;
    let factorization = DuQuantFactorization::from_parts(
        lambda,
        perm,
        meta.block_size,
        meta.smoothing_alpha,
        meta.rotation_seed,
        meta.mode,
    )?;
    Ok(Linear::Quant { factorization, layer })
}

fn block_prefix(part: Part, index: usize) -> String {
    format!("{}.{index}", part.as_str())
}

pub fn stack_to_container(stack: &Stack, info: &CheckpointInfo) -> CliResult<Container> {
    let mut c = Container::new();
    let mut layers = BTreeMap::new();
    for part in [Part::Llm, Part::Dit] {
        for (i, block) in stack.blocks(part).iter().enumerate() {
            let p = block_prefix(part, i);
            push_vec(&mut c, &format!("{p}.ln1.gamma"), &block.ln1.gamma)?;
            push_vec(&mut c, &format!("{p}.ln1.beta"), &block.ln1.beta)?;
            push_vec(&mut c, &format!("{p}.ln2.gamma"), &block.ln2.gamma)?;
            push_vec(&mut c, &format!("{p}.ln2.beta"), &block.ln2.beta)?;
            for proj in Proj::ALL {
                push_linear(
                    &mut c,
                    &mut layers,
                    &format!("{p}.{}", proj.as_str()),
                    block.linear(proj),
                )?;
            }
        }
    }
    push_linear(&mut c, &mut layers, "action_in", &stack.action_in)?;
    push_matrix(&mut c, "timestep_embedding", &stack.timestep_embedding)?;
    push_vec(&mut c, "final_norm.gamma", &stack.final_norm.gamma)?;
    push_vec(&mut c, "final_norm.beta", &stack.final_norm.beta)?;
    push_linear(&mut c, &mut layers, "action_out", &stack.action_out)?;

    c.set_meta("kind", &KIND_CHECKPOINT)?;
    c.set_meta("seed", &info.seed)?;
    c.set_meta("config", &info.config)?;
    c.set_meta("layout", &info.layout)?;
    c.set_meta("quant_spec", &info.quant_spec)?;
    c.set_meta("scalars", &info.scalars)?;
    c.set_meta("quantized_layers", &layers)?;
    Ok(c)
}

fn expect_kind(c: &Container, kind: &str) -> CliResult<()> {
    let found: String = c.meta("kind")?;
    if found != kind {
        return Err(validation(format!("expected a {kind} container, found {found}")));
    }
    Ok(())
}

pub fn checkpoint_info(c: &Container) -> CliResult<CheckpointInfo> {
    expect_kind(c, KIND_CHECKPOINT)?;
    Ok(CheckpointInfo {
        seed: c.meta("seed")?,
        config: c.meta("config")?,
        layout: c.meta("layout")?,
        quant_spec: c.meta("quant_spec")?,
        scalars: c.meta("scalars")?,
    })
}

pub fn stack_from_container(c: &Container) -> CliResult<(Stack, CheckpointInfo)> {
    let info = checkpoint_info(c)?;
    let cfg = info.config;
    cfg.validate()?;
    let layers: BTreeMap<String, LayerMeta> = c.meta("quantized_layers")?;
    // start from a zero stack of the right shape and overwrite every tensor
    let mut stack = Stack::zeros(&cfg)?;
    stack.layout = info.layout;
    let d = cfg.model_dim;
    let h = cfg.hidden_dim();
    let dims = |proj: Proj| match proj {
        Proj::MlpIn => (d, h, true),
        Proj::MlpOut => (h, d, true),
        Proj::O => (d, d, true),
        _ => (d, d, false),
    };
    for part in [Part::Llm, Part::Dit] {
        let count = stack.blocks(part).len();
        for i in 0..count {
            let p = block_prefix(part, i);
            let ln = |which: &str| -> CliResult<LayerNorm<f64>> {
                Ok(LayerNorm {
                    gamma: read_vec(c, &format!("{p}.{which}.gamma"), d)?,
                    beta: read_vec(c, &format!("{p}.{which}.beta"), d)?,
                })
            };
            let (ln1, ln2) = (ln("ln1")?, ln("ln2")?);
            let block: &mut Block<f64> = stack.block_mut(part, i).expect("block exists");
            block.ln1 = ln1;
            block.ln2 = ln2;
            for proj in Proj::ALL {
                let (i_dim, o_dim, bias) = dims(proj);
                *block.linear_mut(proj) =
                    read_linear(c, &layers, &format!("{p}.{}", proj.as_str()), i_dim, o_dim, bias)?;
            }
        }
    }
    stack.action_in = read_linear(c, &layers, "action_in", cfg.action_dim, d, true)?;
    stack.timestep_embedding = read_matrix(c, "timestep_embedding", cfg.max_steps, d)?;
    stack.final_norm = LayerNorm {
        gamma: read_vec(c, "final_norm.gamma", d)?,
        beta: read_vec(c, "final_norm.beta", d)?,
    };
    stack.action_out = read_linear(c, &layers, "action_out", d, cfg.action_dim, true)?;
    let expected = stack.sites().iter().filter(|s| info.layout.quantizes(**s)).count();
    if expected != stack.quantized_sites().len() {
        return Err(validation(format!(
            "layout {} expects {expected} quantized layers, checkpoint has {}",
            info.layout,
            stack.quantized_sites().len()
        )));
    }
    Ok((stack, info))
}

pub fn buffer_to_container(samples: &[Sample], config: &ModelConfig, seed: u64) -> CliResult<Container> {
    let mut c = Container::new();
    for (i, s) in samples.iter().enumerate() {
        push_matrix(&mut c, &format!("sample.{i}.tokens"), &s.tokens)?;
        push_matrix(&mut c, &format!("sample.{i}.latent"), &s.latent)?;
    }
    c.set_meta("kind", &KIND_BUFFER)?;
    c.set_meta("seed", &seed)?;
    c.set_meta("config", config)?;
    c.set_meta("samples", &samples.len())?;
    Ok(c)
}

pub fn buffer_from_container(c: &Container) -> CliResult<(Vec<Sample>, ModelConfig)> {
    expect_kind(c, KIND_BUFFER)?;
    let cfg: ModelConfig = c.meta("config")?;
    let n: usize = c.meta("samples")?;
    if n == 0 {
        return Err(validation("calibration buffer is empty"));
    }
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                tokens: read_matrix(c, &format!("sample.{i}.tokens"), cfg.seq_len, cfg.model_dim)?,
                latent: read_matrix(c, &format!("sample.{i}.latent"), cfg.action_horizon, cfg.action_dim)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((samples, cfg))
}

/// Checks that a buffer was generated for a model with the same shapes.
pub fn check_buffer_matches(buffer_cfg: &ModelConfig, model_cfg: &ModelConfig) -> CliResult<()> {
    let shape = |c: &ModelConfig| (c.seq_len, c.model_dim, c.action_horizon, c.action_dim);
    if shape(buffer_cfg) != shape(model_cfg) {
        return Err(validation("calibration buffer shapes do not match the model"));
    }
    Ok(())
}
