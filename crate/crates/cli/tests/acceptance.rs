//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlaquant::calibration::{
    atm_scalar, calibrate_pipeline, capture_statistics, fold_scalars, ohb_scalar, CalibConfig, CalibScalars, Scope,
    DEFAULT_BAND, DEFAULT_CLIP,
};
use vlaquant::drift::{block_metrics, default_scales, scaled_logits, stack_convergence};
use vlaquant::duquant::{build_factorization, FactorizationConfig, FactorizationMode};
use vlaquant::model::{Part, Proj};
use vlaquant::numerics::{matmul, softmax_rows};
use vlaquant::quantizer::{
    estimate_activation_range, fake_quant_linear, integer_linear, make_activation_qparams, quantize_activations,
    quantize_weights_per_channel,
};
use vlaquant::{
    apply_layout, effective_temperature, CalibSample, IntMatrix, Layout, LayoutConfig, Matrix, ModelConfig,
    PolicyStack, QuantSpec, ScaleTuple,
};
use vlaquant_cli::checkpoint::{stack_to_container, CheckpointInfo};
use vlaquant_cli::commands::{Cli, Command};
use vlaquant_cli::container::{Container, TensorData};
use vlaquant_cli::memory::{estimate_memory, linear_layer, MemoryEstimate, ACT_QPARAM_BYTES, BASELINE_BYTES};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::gaussian(rows, cols, scale, rng)
}

fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn toy(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::default()
    }
}

fn setup(seed: u64, layout: Layout, samples: usize) -> (PolicyStack<f64>, PolicyStack<f64>, Vec<CalibSample<f64>>) {
    let cfg = toy(seed);
    let teacher = PolicyStack::build(&cfg).unwrap();
    let buffer = CalibSample::buffer(&cfg, samples, seed ^ 0xb0f);
    let student = apply_layout(&teacher, layout, &LayoutConfig::default(), &buffer).unwrap();
    (teacher, student, buffer)
}

fn a1_rtn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, k, m) = (
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=32),
        );
        let wbits = [2u32, 4, 8][rng.random_range(0..3)];
        let abits = [4u32, 8, 16][rng.random_range(0..3)];
        let x = gaussian(n, k, 1.0, &mut rng);
        let w = gaussian(k, m, 0.3, &mut rng);
        let bias = gaussian(1, m, 0.1, &mut rng).into_vec();
        let spec = ok(QuantSpec::new(wbits, abits, 99.9))?;
        let range = ok(estimate_activation_range(std::slice::from_ref(&x), spec.percentile))?;
        let reference = ok(fake_quant_linear(&x, &w, Some(&bias), &spec, range))?;
        let q = ok(make_activation_qparams(range.0, range.1, abits))?;
        let mut layer = ok(quantize_weights_per_channel(&w, wbits))?;
        layer.bias = Some(bias);
        let y = ok(integer_linear(&quantize_activations(&x, &q), &q, &layer))?;
        worst = worst.max(rel_err(&y, &reference));
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:.3e} > 1e-9"))?;
    Ok(format!("max relative error {worst:.2e} over 100 instances"))
}

fn a2_duquant_exact() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa2 + seed);
        let block_size = [1usize, 2, 4, 8, 16, 32, 64][rng.random_range(0..7)];
        let n = block_size * rng.random_range(1..=64 / block_size);
        let out = rng.random_range(1..=64);
        let x = gaussian(16, n, 1.0, &mut rng);
        let w = gaussian(n, out, 0.5, &mut rng);
        let cfg = FactorizationConfig {
            alpha: 0.15,
            block_size,
            seed,
            mode: FactorizationMode::Full,
        };
        let f = ok(build_factorization(&x.col_abs_max(), &w, &cfg))?;
        let y = ok(matmul(&ok(f.apply_activation_side(&x))?, &ok(f.fold_weight_side(&w))?))?;
        worst = worst.max(rel_err(&y, &ok(matmul(&x, &w))?));
    }
    ensure(worst <= 1e-8, || format!("max relative error {worst:.3e} > 1e-8"))?;
    Ok(format!("max relative Frobenius error {worst:.2e} over 20 seeds"))
}

fn a3_scalar_arithmetic() -> Outcome {
    let (c, e) = (DEFAULT_CLIP, DEFAULT_BAND);
    ensure(c == 0.4 && e == 0.03, || format!("defaults clip {c} band {e}"))?;
    let guard = |t: f64, s: f64| t / (s + 1e-6);
    let cases: [(&str, (f64, f64), f64, f64); 6] = [
        (
            "atm in range",
            atm_scalar(1.2, 1.0, c, e),
            guard(1.2, 1.0),
            guard(1.2, 1.0),
        ),
        ("atm clipped", atm_scalar(3.0, 1.0, c, e), guard(3.0, 1.0), 0.4f64.exp()),
        ("atm banded", atm_scalar(1.01, 1.0, c, e), guard(1.01, 1.0), 1.0),
        (
            "ohb clipped",
            ohb_scalar(0.5, 1.0, c, e),
            guard(0.5, 1.0),
            (-0.4f64).exp(),
        ),
        ("ohb banded", ohb_scalar(1.0, 1.0, c, e), guard(1.0, 1.0), 1.0),
        (
            "ohb in range",
            ohb_scalar(1.1, 1.0, c, e),
            guard(1.1, 1.0),
            guard(1.1, 1.0),
        ),
    ];
    for (name, (raw, value), want_raw, want) in cases {
        ensure((raw - want_raw).abs() <= 1e-6 && (value - want).abs() <= 1e-6, || {
            format!("{name}: got ({raw}, {value}), want ({want_raw}, {want})")
        })?;
    }
    ensure(
        (0.4f64.exp() - 1.4918).abs() < 5e-5 && ((-0.4f64).exp() - 0.6703).abs() < 5e-5,
        || "clip bounds".into(),
    )?;
    Ok("6 worked examples match; clip 0.4, band 0.03".into())
}

fn a4_fold_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let layout = Layout::ALL[seed as usize % Layout::ALL.len()];
        let (_, student, buffer) = setup(seed, layout, 2);
        let cfg = student.config;
        let all = CalibConfig {
            atm_scope: Scope::All,
            beta_scope: Scope::All,
            ..CalibConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0xa4 + seed);
        let mut scalars = CalibScalars::<f64>::neutral(&cfg, all);
        scalars
            .alpha
            .iter_mut()
            .flatten()
            .for_each(|a| *a = rng.random_range(-0.4f64..0.4).exp());
        scalars
            .beta
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.4f64..0.4).exp());
        let folded = ok(fold_scalars(&student, &scalars))?;
        let gains = scalars.gains();
        for s in &buffer {
            let f_run = ok(student.llm_forward(&s.tokens, Some(&gains)))?;
            let f_fold = ok(folded.llm_forward(&s.tokens, None))?;
            let x_run = ok(student.rollout(&s.latent, &f_run, cfg.denoise_steps, Some(&gains)))?;
            let x_fold = ok(folded.rollout(&s.latent, &f_fold, cfg.denoise_steps, None))?;
            worst = worst.max(rel_err(&f_fold, &f_run)).max(rel_err(&x_fold, &x_run));
        }
    }
    ensure(worst <= 1e-10, || format!("max relative deviation {worst:.3e} > 1e-10"))?;
    Ok(format!("max relative deviation {worst:.2e} over 10 seeds, all layouts"))
}

fn a5_calibration() -> Outcome {
    // self-calibration
    let cfg = toy(1);
    let teacher = ok(PolicyStack::<f64>::build(&cfg))?;
    let buffer = CalibSample::buffer(&cfg, 8, 1);
    let all = CalibConfig {
        atm_scope: Scope::All,
        beta_scope: Scope::All,
        ..CalibConfig::default()
    };
    let (folded, scalars, _) = ok(calibrate_pipeline(&teacher, &teacher, &buffer, &all))?;
    ensure(scalars.is_neutral() && folded == teacher, || {
        "self-calibration not neutral".into()
    })?;

    // first in-scope block, unclipped and unbanded
    let mut worst_std = 0.0f64;
    for layout in [Layout::LlmDit, Layout::LlmDitMlp] {
        let (teacher, student, buffer) = setup(7, layout, 8);
        let open = CalibConfig {
            clip: 50.0,
            band: 0.0,
            ..CalibConfig::default()
        };
        let (calibrated, _, _) = ok(calibrate_pipeline(&teacher, &student, &buffer, &open))?;
        let after = ok(capture_statistics(&teacher, &calibrated, &buffer))?;
        let first = &after.blocks[teacher.config.llm_layers];
        for (t, s) in first.teacher.logits.iter().zip(&first.student.logits) {
            let (t, s) = (t.std().unwrap(), s.std().unwrap());
            worst_std = worst_std.max((t - s).abs() / t);
        }
    }
    ensure(worst_std <= 1e-6, || {
        format!("first-block Std gap {worst_std:.3e} > 1e-6")
    })?;

    // mean |log RMS gap| after output balancing, default settings
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let (teacher, student, buffer) = setup(seed, Layout::LlmDitMlp, 8);
        let ohb_only = CalibConfig {
            atm: false,
            ..CalibConfig::default()
        };
        let (calibrated, _, _) = ok(calibrate_pipeline(&teacher, &student, &buffer, &ohb_only))?;
        let report = ok(block_metrics(&teacher, &student, &calibrated, &buffer))?;
        let n = report.blocks.len() as f64;
        let raw = report.blocks.iter().map(|b| b.raw_log_rms_gap()).sum::<f64>() / n;
        let cal = report.blocks.iter().map(|b| b.calibrated_log_rms_gap()).sum::<f64>() / n;
        ensure(cal <= raw, || {
            format!("seed {seed}: mean log RMS gap {raw:.4} -> {cal:.4}")
        })?;
        rows.push(format!("{raw:.4}->{cal:.4}"));
    }
    Ok(format!(
        "self-calibration neutral; first-block Std gap {worst_std:.1e}; mean log RMS gap {}",
        rows.join(" ")
    ))
}

fn a6_convergence() -> Outcome {
    let mut slopes = Vec::new();
    for seed in 0..20u64 {
        let cfg = toy(seed);
        let teacher = ok(PolicyStack::<f64>::build(&cfg))?;
        let buffer = CalibSample::buffer(&cfg, 1, seed ^ 0xc0);
        let table = ok(stack_convergence(&teacher, &buffer, &default_scales(), seed))?;
        let slope = table.slope.ok_or_else(|| format!("seed {seed}: no slope"))?;
        slopes.push(slope);
    }
    let min = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(min >= 1.8, || format!("minimum slope {min:.4} < 1.8"))?;
    Ok(format!("minimum log-log slope {min:.4} over 20 seeds"))
}

fn a7_temperature() -> Outcome {
    let t = |d: usize, s_q: f64, s_k: f64| -> f64 {
        effective_temperature(&ScaleTuple {
            s_q,
            s_k,
            s_v: 1.0,
            s_o: 1.0,
            head_dim: d,
        })
        .unwrap()
    };
    ensure(t(64, 1.0, 1.0) == 8.0, || "d=64 unit scales".into())?;
    ensure((t(64, 0.1, 0.2) - 400.0).abs() <= 1e-12 * 400.0, || {
        format!("d=64, 0.1, 0.2 gave {}", t(64, 0.1, 0.2))
    })?;
    ensure(t(64, 0.6, 0.3) == t(64, 0.3, 0.3) / 2.0, || "doubling s_q".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xa7);
    for case in 0..50 {
        let (n, m, d) = (rng.random_range(1..8), rng.random_range(2..10), rng.random_range(1..65));
        let ints = |rows, rng: &mut ChaCha8Rng| {
            IntMatrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-127..=127)).collect()).unwrap()
        };
        let (q, k) = (ints(n, &mut rng), ints(m, &mut rng));
        let s = ScaleTuple {
            s_q: rng.random_range(1e-3..2.0),
            s_k: rng.random_range(1e-3..2.0),
            s_v: 1.0,
            s_o: 1.0,
            head_dim: d,
        };
        let logits = ok(scaled_logits(&q, &k, &s))?;
        let raw = ok(matmul(&q.to_real::<f64>(), &k.to_real::<f64>().transpose()))?;
        let back = logits.scale(ok(effective_temperature(&s))?);
        ensure(rel_err(&back, &raw) <= 1e-10 || raw.frobenius_norm() == 0.0, || {
            format!("case {case}: rescaled logits differ from the integer product")
        })?;
        let probs = softmax_rows(&logits);
        for r in 0..n {
            ensure(argmax(probs.row(r)) == argmax(raw.row(r)), || {
                format!("case {case}, row {r}: argmax moved")
            })?;
        }
    }
    Ok("formula examples exact; argmax invariant on 50 cases".into())
}

fn tensor_bytes(c: &Container, name: &str) -> Option<Vec<u8>> {
    c.get(name).map(|t| match &t.data {
        TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
    })
}

fn a8_selective_layout() -> Outcome {
    let (teacher, student, _) = setup(5, Layout::LlmDitMlp, 4);
    let cfg = teacher.config;
    let info = |layout, quant_spec| CheckpointInfo {
        seed: 5,
        config: cfg,
        layout,
        quant_spec,
        scalars: None,
    };
    let tc = ok(stack_to_container(&teacher, &info(Layout::None, None)))?;
    let sc = ok(stack_to_container(
        &student,
        &info(Layout::LlmDitMlp, Some(QuantSpec::default())),
    ))?;
    let mut compared = 0;
    for tensor in tc
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with("dit.") && t.name.contains(".attn."))
    {
        ensure(
            tensor_bytes(&sc, &tensor.name) == tensor_bytes(&tc, &tensor.name),
            || format!("{} changed", tensor.name),
        )?;
        compared += 1;
    }
    for b in 0..cfg.dit_layers {
        for p in ["wq", "wk", "wv", "wo"] {
            let name = format!("dit.{b}.attn.{p}.weight");
            ensure(tc.get(&name).is_some() && sc.get(&name).is_some(), || {
                format!("missing {name}")
            })?;
        }
    }
    let quantized = student.quantized_sites();
    let expected = cfg.llm_layers * Proj::ALL.len() + cfg.dit_layers * 2;
    ensure(quantized.len() == expected, || {
        format!("{} quantized layers, expected {expected}", quantized.len())
    })?;
    ensure(
        quantized.iter().all(|s| s.part == Part::Llm || !s.proj.is_attention()),
        || "a DiT attention projection was quantized".into(),
    )?;
    Ok(format!(
        "{compared} DiT attention tensors byte-identical; {expected} quantized layers"
    ))
}

fn a9_memory() -> Outcome {
    let l = linear_layer("w", 1024, 1024, false, Some(4), false);
    let overhead = (l.scale_bytes + l.factorization_bytes) as f64 / l.float_bytes as f64;
    let m = MemoryEstimate::from_layers(vec![l.clone()]);
    ensure((m.relative_savings - (0.75 - overhead)).abs() <= 1e-12, || {
        format!("savings {} != 0.75 - {overhead}", m.relative_savings)
    })?;
    ensure(l.quant_bytes == 524_288 + 2048 + ACT_QPARAM_BYTES, || {
        format!("quant bytes {}", l.quant_bytes)
    })?;
    ensure((m.relative_savings - 0.749).abs() < 5e-4, || {
        format!("savings {}", m.relative_savings)
    })?;
    let lf = linear_layer("w", 1024, 1024, false, Some(4), true);
    let overhead_f = (lf.scale_bytes + lf.factorization_bytes) as f64 / lf.float_bytes as f64;
    let mf = MemoryEstimate::from_layers(vec![lf]);
    ensure((mf.relative_savings - (0.75 - overhead_f)).abs() <= 1e-12, || {
        "factorized layer".into()
    })?;

    // mixture: every layout equals the per-site sum computed independently
    let stack = ok(PolicyStack::<f64>::zeros(&ModelConfig::default()))?;
    let spec = QuantSpec::default();
    let none = estimate_memory(&stack, Layout::None, &spec);
    let mut savings = std::collections::BTreeMap::new();
    for layout in Layout::ALL {
        let est = estimate_memory(&stack, layout, &spec);
        let mut quant = none.quant_bytes;
        for site in stack.sites().into_iter().filter(|&s| layout.quantizes(s)) {
            let lin = stack.linear(site).unwrap();
            let bias = lin.bias().is_some();
            let (i, o) = (lin.in_dim() as u64, lin.out_dim() as u64);
            let q = linear_layer("", i, o, bias, Some(spec.weight_bits), true);
            quant = quant - (i * o + if bias { o } else { 0 }) * BASELINE_BYTES + q.quant_bytes;
        }
        ensure(est.quant_bytes == quant && est.float_bytes == none.float_bytes, || {
            format!("{}: {} != mixture {quant}", layout.as_str(), est.quant_bytes)
        })?;
        ensure(
            est.quant_bytes == est.layers.iter().map(|l| l.quant_bytes).sum::<u64>(),
            || "layer totals".into(),
        )?;
        savings.insert(layout.as_str(), est.relative_savings);
    }
    let (llm, mix, both) = (savings["llm"], savings["llm+dit-mlp"], savings["llm+dit"]);
    ensure(savings["none"] == 0.0, || "none saves memory".into())?;
    ensure(llm < mix && mix < both && both < 0.75, || {
        format!("ordering {llm} {mix} {both}")
    })?;
    Ok(format!(
        "1024x1024 W4 saves {:.2}%; toy llm {:.2}% < llm+dit-mlp {:.2}% < llm+dit {:.2}%",
        100.0 * m.relative_savings,
        100.0 * llm,
        100.0 * mix,
        100.0 * both
    ))
}

fn a10_defaults() -> Outcome {
    let cli = ok(Cli::try_parse_from([
        "vlaquant", "quantize", "--model", "m", "--buffer", "b", "--seed", "0", "--out", "o",
    ]))?;
    let Command::Quantize(q) = cli.command else {
        return Err("quantize did not parse".into());
    };
    ensure(q.wbits == 4 && q.abits == 8, || format!("W{}A{}", q.wbits, q.abits))?;
    ensure(q.percentile == 99.9, || format!("percentile {}", q.percentile))?;
    ensure(q.block_size == 64, || format!("block size {}", q.block_size))?;
    ensure(q.smooth_alpha == 0.15, || format!("smoothing {}", q.smooth_alpha))?;
    ensure(q.clip == 0.4 && q.band == 0.03, || {
        format!("clip {} band {}", q.clip, q.band)
    })?;
    let calib = ok(q.calibration())?;
    ensure(calib.atm && calib.ohb && calib.beta_scope == Scope::Dit, || {
        "calibration defaults".into()
    })?;
    ensure(ok(q.spec())? == QuantSpec::default(), || "spec defaults".into())?;

    let cli = ok(Cli::try_parse_from([
        "vlaquant",
        "gen-buffer",
        "--model",
        "m",
        "--seed",
        "0",
        "--out",
        "o",
    ]))?;
    let Command::GenBuffer(b) = cli.command else {
        return Err("gen-buffer did not parse".into());
    };
    ensure(b.samples == 32, || format!("buffer samples {}", b.samples))?;
    let cli = ok(Cli::try_parse_from([
        "vlaquant",
        "run",
        "--model",
        "m",
        "--fvl-seed",
        "0",
        "--x-seed",
        "0",
        "--out",
        "o",
    ]))?;
    let Command::Run(r) = cli.command else {
        return Err("run did not parse".into());
    };
    ensure(r.steps == 8, || format!("steps {}", r.steps))?;
    Ok("W4A8, percentile 99.9, block 64, smoothing 0.15, clip 0.4, band 0.03, 32 samples, 8 steps".into())
}

fn vlaquant(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Process::new(env!("CARGO_BIN_EXE_vlaquant"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("vlaquant {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out.stdout)
}

fn pipeline(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let steps: [&[&str]; 6] = [
        &["gen-model", "--seed", "11", "--out", "teacher"],
        &[
            "gen-buffer",
            "--model",
            "teacher",
            "--samples",
            "4",
            "--seed",
            "12",
            "--out",
            "buffer",
        ],
        &[
            "quantize", "--model", "teacher", "--buffer", "buffer", "--seed", "13", "--out", "student", "--no-atm",
            "--no-ohb",
        ],
        &[
            "quantize",
            "--model",
            "teacher",
            "--buffer",
            "buffer",
            "--seed",
            "13",
            "--out",
            "calibrated",
        ],
        &[
            "run",
            "--model",
            "calibrated",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--out",
            "run.json",
        ],
        &[
            "drift",
            "--teacher",
            "teacher",
            "--student",
            "student",
            "--calibrated",
            "calibrated",
            "--buffer",
            "buffer",
            "--seed",
            "3",
            "--out",
            "drift.json",
            "--csv",
            "drift.csv",
        ],
    ];
    for args in steps {
        vlaquant(dir, args)?;
    }
    let summary = vlaquant(
        dir,
        &[
            "report",
            "--in",
            "calibrated/report.json",
            "run.json",
            "drift.json",
            "--format",
            "csv",
        ],
    )?;
    let mut files = vec![(PathBuf::from("<report stdout>"), summary)];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(|e| e.to_string())?;
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn a11_determinism() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    ensure(first.len() == second.len(), || "different file sets".into())?;
    for ((pa, da), (pb, db)) in first.iter().zip(&second) {
        ensure(pa == pb && da == db, || {
            format!("{} differs between runs", pa.display())
        })?;
    }
    let mut round_trips = 0;
    for name in ["teacher", "buffer", "student", "calibrated"] {
        let dir = a.path().join(name);
        let c = ok(Container::read(&dir))?;
        let (m, blob) = ok(c.encode())?;
        let on_disk = (
            ok(fs::read(dir.join("manifest.json")))?,
            ok(fs::read(dir.join("weights.bin")))?,
        );
        ensure((m, blob) == on_disk, || format!("{name}: rewrite differs"))?;
        round_trips += 1;
    }
    Ok(format!(
        "{} outputs byte-identical across two runs; {round_trips} containers rewrite byte-identically",
        first.len()
    ))
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion {
            id: "A1",
            title: "integer path matches fake quantization",
            budget: secs(10),
            run: a1_rtn_oracle,
        },
        Criterion {
            id: "A2",
            title: "rotation/permutation fold is exact",
            budget: secs(5),
            run: a2_duquant_exact,
        },
        Criterion {
            id: "A3",
            title: "logit and output gain arithmetic",
            budget: None,
            run: a3_scalar_arithmetic,
        },
        Criterion {
            id: "A4",
            title: "runtime gains match folded checkpoint",
            budget: secs(10),
            run: a4_fold_equivalence,
        },
        Criterion {
            id: "A5",
            title: "calibration self-consistency",
            budget: secs(60),
            run: a5_calibration,
        },
        Criterion {
            id: "A6",
            title: "first-order drift convergence",
            budget: secs(60),
            run: a6_convergence,
        },
        Criterion {
            id: "A7",
            title: "effective temperature",
            budget: None,
            run: a7_temperature,
        },
        Criterion {
            id: "A8",
            title: "selective layout invariant",
            budget: None,
            run: a8_selective_layout,
        },
        Criterion {
            id: "A9",
            title: "memory accounting",
            budget: None,
            run: a9_memory,
        },
        Criterion {
            id: "A10",
            title: "default configuration",
            budget: None,
            run: a10_defaults,
        },
        Criterion {
            id: "A11",
            title: "determinism and container round trip",
            budget: None,
            run: a11_determinism,
        },
    ];
    let mut failed = 0;
    for c in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => {
                Err(format!("took {:.2} s, budget {} s", elapsed.as_secs_f64(), b.as_secs()))
            }
            (o, _) => o,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {} {}: {detail} ({:.2} s)", c.id, c.title, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
