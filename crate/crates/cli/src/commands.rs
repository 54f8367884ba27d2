use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vlaquant::calibration::{calibrate_pipeline, CalibConfig, Scope, DEFAULT_BAND, DEFAULT_CLIP};
use vlaquant::drift::{block_metrics, default_scales, stack_convergence};
use vlaquant::duquant::{FactorizationMode, DEFAULT_BLOCK_SIZE, DEFAULT_SMOOTHING_ALPHA};
use vlaquant::{FactorizationConfig, Layout, LayoutConfig, Matrix, ModelConfig, QuantSpec, Sample, Scalars, Stack};

use crate::checkpoint::{
    buffer_from_container, buffer_to_container, check_buffer_matches, stack_from_container, stack_to_container,
    CheckpointInfo,
};
use crate::container::Container;
use crate::error::{CliError, CliResult};
use crate::memory::estimate_memory;
use crate::report::{merge, Report, RolloutSection};

pub const DEFAULT_SAMPLES: usize = 32;
pub const DEFAULT_STEPS: usize = 8;
/// Widest weight grid the container can hold.
pub const MAX_CONTAINER_WEIGHT_BITS: u32 = 8;

#[derive(Debug, Parser)]
#[command(
    name = "vlaquant",
    version,
    about = "Post-training quantization for a toy policy stack"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded floating-point teacher checkpoint.
    GenModel(GenModelArgs),
    /// Generate a seeded calibration buffer for a model.
    GenBuffer(GenBufferArgs),
    /// Quantize a teacher, calibrate attention scalars and write the student.
    Quantize(QuantizeArgs),
    /// Roll out the denoising head from seeded inputs.
    Run(RunArgs),
    /// Per-block drift curves and the first-order convergence study.
    Drift(DriftArgs),
    /// Merge reports into one summary on stdout.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// JSON model configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub llm_layers: Option<usize>,
    #[arg(long)]
    pub dit_layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub action_dim: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenBufferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub buffer: PathBuf,
    /// none, llm, dit, llm+dit or llm+dit-mlp.
    #[arg(long, default_value = "llm+dit-mlp")]
    pub layout: Layout,
    #[arg(long, default_value_t = 4)]
    pub wbits: u32,
    #[arg(long, default_value_t = 8)]
    pub abits: u32,
    #[arg(long, default_value_t = 99.9)]
    pub percentile: f64,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_ALPHA)]
    pub smooth_alpha: f64,
    /// Per-head logit gains (on unless --no-atm).
    #[arg(long, overrides_with = "no_atm")]
    pub atm: bool,
    #[arg(long)]
    pub no_atm: bool,
    /// Per-block output gains (on unless --no-ohb).
    #[arg(long, overrides_with = "no_ohb")]
    pub ohb: bool,
    #[arg(long)]
    pub no_ohb: bool,
    #[arg(long, default_value_t = DEFAULT_CLIP)]
    pub clip: f64,
    #[arg(long, default_value_t = DEFAULT_BAND)]
    pub band: f64,
    /// dit or all.
    #[arg(long, default_value = "dit")]
    pub atm_scope: Scope,
    /// dit or all.
    #[arg(long, default_value = "dit")]
    pub beta_scope: Scope,
    /// Seeds the rotation blocks.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path; defaults to `report.json` inside the output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Seeds the conditioning tokens fed to the language trunk.
    #[arg(long)]
    pub fvl_seed: u64,
    /// Seeds the initial action latent.
    #[arg(long)]
    pub x_seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DriftArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub calibrated: PathBuf,
    #[arg(long)]
    pub buffer: PathBuf,
    /// Comma-separated decreasing perturbation scales; defaults to
    /// 1e-1 ... 1e-4 in half-decade steps.
    #[arg(long, value_delimiter = ',')]
    pub eps_sweep: Vec<f64>,
    /// Seeds the convergence perturbation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV export of the same report.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_stack(path: &Path) -> CliResult<(Stack, CheckpointInfo)> {
    stack_from_container(&Container::read(path)?)
}

fn load_buffer(path: &Path, model: &ModelConfig) -> CliResult<Vec<Sample>> {
    let (samples, cfg) = buffer_from_container(&Container::read(path)?)?;
    check_buffer_matches(&cfg, model)?;
    Ok(samples)
}

/// Runs `f`; on failure removes the listed outputs that did not exist
/// beforehand.
fn with_cleanup<T>(outputs: &[&Path], f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let fresh: Vec<&Path> = outputs.iter().copied().filter(|p| !p.exists()).collect();
    let result = f();
    if result.is_err() {
        for p in fresh {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else if p.exists() {
                let _ = fs::remove_file(p);
            }
        }
    }
    result
}

fn model_config(args: &GenModelArgs) -> CliResult<ModelConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            serde_json::from_str::<ModelConfig>(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.llm_layers, args.llm_layers);
    set(&mut cfg.dit_layers, args.dit_layers);
    set(&mut cfg.model_dim, args.dim);
    set(&mut cfg.heads, args.heads);
    set(&mut cfg.seq_len, args.seq_len);
    set(&mut cfg.action_dim, args.action_dim);
    set(&mut cfg.action_horizon, args.horizon);
    set(&mut cfg.denoise_steps, args.steps);
    set(&mut cfg.max_steps, args.max_steps);
    set(&mut cfg.mlp_ratio, args.mlp_ratio);
    cfg.seed = args.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_model(args: &GenModelArgs) -> CliResult<()> {
    with_cleanup(&[&args.out], || {
        let cfg = model_config(args)?;
        let stack = Stack::build(&cfg)?;
        let info = CheckpointInfo {
            seed: args.seed,
            config: cfg,
            layout: Layout::None,
            quant_spec: None,
            scalars: None,
        };
        stack_to_container(&stack, &info)?.write(&args.out)
    })
}

pub fn gen_buffer(args: &GenBufferArgs) -> CliResult<()> {
    if args.samples == 0 {
        return Err(invalid("--samples must be at least 1"));
    }
    with_cleanup(&[&args.out], || {
        let (_, info) = load_stack(&args.model)?;
        let samples = Sample::buffer(&info.config, args.samples, args.seed);
        buffer_to_container(&samples, &info.config, args.seed)?.write(&args.out)
    })
}

impl QuantizeArgs {
    pub fn spec(&self) -> CliResult<QuantSpec> {
        if !(2..=MAX_CONTAINER_WEIGHT_BITS).contains(&self.wbits) {
            return Err(invalid(format!(
                "--wbits {} outside [2, {MAX_CONTAINER_WEIGHT_BITS}]",
                self.wbits
            )));
        }
        Ok(QuantSpec::new(self.wbits, self.abits, self.percentile)?)
    }

    pub fn factorization(&self) -> CliResult<FactorizationConfig> {
        if self.block_size == 0 {
            return Err(invalid("--block-size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.smooth_alpha) {
            return Err(invalid("--smooth-alpha must lie in [0, 1]"));
        }
        Ok(FactorizationConfig {
            alpha: self.smooth_alpha,
            block_size: self.block_size,
            seed: self.seed,
            mode: FactorizationMode::Full,
        })
    }

    pub fn calibration(&self) -> CliResult<CalibConfig> {
        let cfg = CalibConfig {
            clip: self.clip,
            band: self.band,
            atm: !self.no_atm,
            ohb: !self.no_ohb,
            atm_scope: self.atm_scope,
            beta_scope: self.beta_scope,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn quantize(args: &QuantizeArgs) -> CliResult<()> {
    let report_path = args.report.clone().unwrap_or_else(|| args.out.join("report.json"));
    with_cleanup(&[&args.out, &report_path], || {
        let spec = args.spec()?;
        let factorization = args.factorization()?;
        let calib = args.calibration()?;
        let (teacher, info) = load_stack(&args.model)?;
        if info.layout != Layout::None || !teacher.quantized_sites().is_empty() {
            return Err(invalid("--model must be a floating-point teacher checkpoint"));
        }
        let buffer = load_buffer(&args.buffer, &teacher.config)?;
        let lc = LayoutConfig { spec, factorization };
        let student = vlaquant::apply_layout(&teacher, args.layout, &lc, &buffer)?;
        let (calibrated, scalars) = if calib.atm || calib.ohb {
            let (c, s, _) = calibrate_pipeline(&teacher, &student, &buffer, &calib)?;
            (c, s)
        } else {
            (student.clone(), Scalars::neutral(&teacher.config, calib))
        };

        let out_info = CheckpointInfo {
            seed: args.seed,
            config: teacher.config,
            layout: args.layout,
            quant_spec: Some(spec),
            scalars: Some(scalars.clone()),
        };
        stack_to_container(&calibrated, &out_info)?.write(&args.out)?;

        let metrics = block_metrics(&teacher, &student, &calibrated, &buffer)?;
        let mut report = Report::new(json!({
            "command": "quantize",
            "model": teacher.config,
            "layout": args.layout,
            "quant_spec": spec,
            "factorization": factorization,
            "calibration": calib,
            "buffer_samples": buffer.len(),
            "seed": args.seed,
            "memory_baseline_bits": 16,
        }));
        report.memory = Some(estimate_memory(&teacher, args.layout, &spec));
        report.scalars = Some(scalars);
        report.blocks = metrics.blocks;
        report.rollout = Some(RolloutSection {
            steps: metrics.rollout.steps,
            divergence: Some(metrics.rollout),
            final_latent: None,
            step_norms: None,
        });
        write_text(&report_path, &report.to_json()?)
    })
}

fn matrix_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn run(args: &RunArgs) -> CliResult<()> {
    with_cleanup(&[&args.out], || {
        let (stack, info) = load_stack(&args.model)?;
        let cfg = stack.config;
        if args.steps > cfg.max_steps {
            return Err(invalid(format!(
                "--steps {} exceeds the model's {} steps",
                args.steps, cfg.max_steps
            )));
        }
        let tokens = Matrix::gaussian(
            cfg.seq_len,
            cfg.model_dim,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(args.fvl_seed),
        );
        let x_init = Matrix::gaussian(
            cfg.action_horizon,
            cfg.action_dim,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(args.x_seed),
        );
        let f_vl = stack.llm_forward(&tokens, None)?;
        let traj = stack.trajectory(&x_init, &f_vl, args.steps, None)?;
        let mut report = Report::new(json!({
            "command": "run",
            "model": cfg,
            "layout": info.layout,
            "fvl_seed": args.fvl_seed,
            "x_seed": args.x_seed,
            "steps": args.steps,
        }));
        report.rollout = Some(RolloutSection {
            steps: args.steps,
            divergence: None,
            final_latent: Some(matrix_rows(traj.last().expect("trajectory holds the initial latent"))),
            step_norms: Some(traj.iter().map(Matrix::frobenius_norm).collect()),
        });
        write_text(&args.out, &report.to_json()?)
    })
}

pub fn drift(args: &DriftArgs) -> CliResult<()> {
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(c) = &args.csv {
        outputs.push(c);
    }
    with_cleanup(&outputs, || {
        let scales = if args.eps_sweep.is_empty() {
            default_scales()
        } else {
            args.eps_sweep.clone()
        };
        let (teacher, _) = load_stack(&args.teacher)?;
        let (student, _) = load_stack(&args.student)?;
        let (calibrated, _) = load_stack(&args.calibrated)?;
        let buffer = load_buffer(&args.buffer, &teacher.config)?;
        let metrics = block_metrics(&teacher, &student, &calibrated, &buffer)?;
        let convergence = stack_convergence(&teacher, &buffer, &scales, args.seed)?;
        let mut report = Report::new(json!({
            "command": "drift",
            "model": teacher.config,
            "layouts": [teacher.layout, student.layout, calibrated.layout],
            "buffer_samples": buffer.len(),
            "eps_sweep": scales,
            "seed": args.seed,
        }));
        report.blocks = metrics.blocks;
        report.rollout = Some(RolloutSection {
            steps: metrics.rollout.steps,
            divergence: Some(metrics.rollout),
            final_latent: None,
            step_norms: None,
        });
        report.convergence = Some(convergence);
        write_text(&args.out, &report.to_json()?)?;
        if let Some(c) = &args.csv {
            write_text(c, &report.to_csv())?;
        }
        Ok(())
    })
}

pub fn report(args: &ReportArgs) -> CliResult<String> {
    let reports = args
        .inputs
        .iter()
        .map(|p| Report::from_json(&read_text(p)?))
        .collect::<CliResult<Vec<_>>>()?;
    let merged = merge(&reports)?;
    match args.format {
        ReportFormat::Json => merged.to_json(),
        ReportFormat::Csv => Ok(merged.to_csv()),
    }
}

/// Executes a parsed command; returns text destined for stdout.
pub fn execute(cli: &Cli) -> CliResult<Option<String>> {
    match &cli.command {
        Command::GenModel(a) => gen_model(a).map(|_| None),
        Command::GenBuffer(a) => gen_buffer(a).map(|_| None),
        Command::Quantize(a) => quantize(a).map(|_| None),
        Command::Run(a) => run(a).map(|_| None),
        Command::Drift(a) => drift(a).map(|_| None),
        Command::Report(a) => report(a).map(Some),
    }
}
