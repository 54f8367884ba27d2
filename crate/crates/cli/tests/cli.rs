use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;
use vlaquant::{Matrix, ModelConfig};
use vlaquant_cli::container::{Container, TensorData};
use vlaquant_cli::report::{Report, CSV_HEADER};

fn vlaquant(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlaquant"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn succeed(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = vlaquant(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    vlaquant(dir, args).status.code().unwrap()
}

/// Small teacher and a 4-sample buffer.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    succeed(dir.path(), &["gen-model", "--seed", "5", "--out", "teacher"]);
    succeed(
        dir.path(),
        &[
            "gen-buffer",
            "--model",
            "teacher",
            "--samples",
            "4",
            "--seed",
            "6",
            "--out",
            "buffer",
        ],
    );
    dir
}

fn quantize(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "quantize", "--model", "teacher", "--buffer", "buffer", "--seed", "1", "--out", out,
    ];
    args.extend_from_slice(extra);
    succeed(dir, &args);
}

fn read(dir: &Path, name: &str) -> Container {
    Container::read(&dir.join(name)).unwrap()
}

#[test]
fn gen_model_is_deterministic_and_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    succeed(p, &["gen-model", "--seed", "3", "--out", "a"]);
    succeed(p, &["gen-model", "--seed", "3", "--out", "b"]);
    succeed(p, &["gen-model", "--seed", "4", "--out", "c"]);
    for f in ["manifest.json", "weights.bin"] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap()
        );
    }
    assert_ne!(
        fs::read(p.join("a/weights.bin")).unwrap(),
        fs::read(p.join("c/weights.bin")).unwrap()
    );
    assert_eq!(code(p, &["gen-model", "--out", "d"]), 1);
    assert!(!p.join("d").exists());
    read(p, "a");
}

#[test]
fn gen_model_config_file_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("cfg.json"), r#"{"llm_layers": 1, "dit_layers": 1}"#).unwrap();
    succeed(
        p,
        &[
            "gen-model",
            "--config",
            "cfg.json",
            "--dim",
            "32",
            "--seed",
            "1",
            "--out",
            "m",
        ],
    );
    let cfg: ModelConfig = read(p, "m").meta("config").unwrap();
    assert_eq!((cfg.llm_layers, cfg.dit_layers, cfg.model_dim, cfg.seed), (1, 1, 32, 1));
    assert_eq!(
        code(p, &["gen-model", "--heads", "5", "--seed", "1", "--out", "bad"]),
        2
    );
    assert!(!p.join("bad").exists());
    assert_eq!(
        code(
            p,
            &["gen-model", "--config", "missing.json", "--seed", "1", "--out", "x"]
        ),
        3
    );
}

#[test]
fn gen_buffer_defaults_and_errors() {
    let dir = fixture();
    let p = dir.path();
    succeed(p, &["gen-buffer", "--model", "teacher", "--seed", "2", "--out", "full"]);
    let full = read(p, "full");
    assert_eq!(full.meta::<usize>("samples").unwrap(), 32);
    assert!(full.get("sample.31.tokens").is_some());
    succeed(
        p,
        &["gen-buffer", "--model", "teacher", "--seed", "2", "--out", "again"],
    );
    assert_eq!(
        fs::read(p.join("full/weights.bin")).unwrap(),
        fs::read(p.join("again/weights.bin")).unwrap()
    );
    assert_eq!(
        code(
            p,
            &[
                "gen-buffer",
                "--model",
                "teacher",
                "--samples",
                "0",
                "--seed",
                "2",
                "--out",
                "z"
            ]
        ),
        2
    );
    assert_eq!(
        code(p, &["gen-buffer", "--model", "nowhere", "--seed", "2", "--out", "z"]),
        3
    );
    assert!(!p.join("z").exists());
}

#[test]
fn quantize_none_keeps_weights() {
    let dir = fixture();
    let p = dir.path();
    quantize(p, "same", &["--layout", "none"]);
    let (t, s) = (read(p, "teacher"), read(p, "same"));
    assert_eq!(t.tensors(), s.tensors());
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("same/report.json")).unwrap()).unwrap();
    assert_eq!(report["memory"]["relative_savings"], 0.0);
}

#[test]
fn quantize_selective_layout_keeps_dit_attention() {
    let dir = fixture();
    let p = dir.path();
    quantize(p, "plain", &["--no-atm", "--no-ohb"]);
    quantize(p, "calibrated", &[]);
    let t = read(p, "teacher");
    let plain = read(p, "plain");
    let calibrated = read(p, "calibrated");
    for tensor in t
        .tensors()
        .iter()
        .filter(|x| x.name.starts_with("dit.") && x.name.contains(".attn."))
    {
        assert_eq!(plain.get(&tensor.name), Some(tensor), "{}", tensor.name);
        // calibration rescales these but keeps them in floating point
        assert!(matches!(calibrated.get(&tensor.name).unwrap().data, TensorData::F32(_)));
    }
    assert!(plain.get("llm.0.attn.wq.qweight").is_some());
    assert!(plain.get("dit.0.mlp.w_in.qweight").is_some());
    assert_eq!(plain.meta::<String>("layout").unwrap(), "llm+dit-mlp");
}

#[test]
fn quantize_errors_leave_no_outputs() {
    let dir = fixture();
    let p = dir.path();
    let args = |out: &'static str, extra: &[&'static str]| {
        let mut a = vec![
            "quantize", "--model", "teacher", "--buffer", "buffer", "--seed", "1", "--out", out,
        ];
        a.extend_from_slice(extra);
        a
    };
    assert_eq!(code(p, &args("w9", &["--wbits", "9"])), 2);
    assert_eq!(code(p, &args("w1", &["--wbits", "1"])), 2);
    assert_eq!(code(p, &args("pc", &["--percentile", "0"])), 2);
    assert_eq!(code(p, &args("cl", &["--clip=-1"])), 2);
    assert_eq!(code(p, &args("bl", &["--block-size", "48"])), 2);
    assert_eq!(code(p, &args("ly", &["--layout", "everything"])), 1);
    // a quantized checkpoint is not a valid teacher
    quantize(p, "student", &[]);
    assert_eq!(
        code(
            p,
            &["quantize", "--model", "student", "--buffer", "buffer", "--seed", "1", "--out", "again"]
        ),
        2
    );
    // buffer shaped for another model
    succeed(p, &["gen-model", "--dim", "32", "--seed", "5", "--out", "narrow"]);
    assert_eq!(
        code(
            p,
            &[
                "quantize", "--model", "narrow", "--buffer", "buffer", "--seed", "1", "--out", "mismatch", "--report",
                "r.json"
            ]
        ),
        2
    );
    for out in ["w9", "w1", "pc", "cl", "bl", "ly", "again", "mismatch", "r.json"] {
        assert!(!p.join(out).exists(), "{out} left behind");
    }
}

#[test]
fn run_rollout_properties() {
    let dir = fixture();
    let p = dir.path();
    succeed(
        p,
        &[
            "run",
            "--model",
            "teacher",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--out",
            "a.json",
        ],
    );
    succeed(
        p,
        &[
            "run",
            "--model",
            "teacher",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(fs::read(p.join("a.json")).unwrap(), fs::read(p.join("b.json")).unwrap());
    let a = Report::from_json(&fs::read_to_string(p.join("a.json")).unwrap()).unwrap();
    let rollout = a.rollout.unwrap();
    assert_eq!(rollout.steps, 8);
    assert_eq!(rollout.step_norms.unwrap().len(), 9);

    succeed(
        p,
        &[
            "run",
            "--model",
            "teacher",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--steps",
            "0",
            "--out",
            "z.json",
        ],
    );
    let z = Report::from_json(&fs::read_to_string(p.join("z.json")).unwrap()).unwrap();
    let cfg = ModelConfig::default();
    let x_init = Matrix::<f64>::gaussian(
        cfg.action_horizon,
        cfg.action_dim,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(2),
    );
    let latent = z.rollout.unwrap().final_latent.unwrap();
    for (r, row) in latent.iter().enumerate() {
        assert_eq!(row.as_slice(), x_init.row(r));
    }
    succeed(
        p,
        &[
            "run",
            "--model",
            "teacher",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--steps",
            "16",
            "--out",
            "s.json",
        ],
    );
    assert_eq!(
        code(
            p,
            &[
                "run",
                "--model",
                "teacher",
                "--fvl-seed",
                "1",
                "--x-seed",
                "2",
                "--steps",
                "17",
                "--out",
                "t.json"
            ]
        ),
        2
    );
    assert!(!p.join("t.json").exists());
}

#[test]
fn drift_against_itself_is_flat() {
    let dir = fixture();
    let p = dir.path();
    succeed(
        p,
        &[
            "drift",
            "--teacher",
            "teacher",
            "--student",
            "teacher",
            "--calibrated",
            "teacher",
            "--buffer",
            "buffer",
            "--out",
            "d.json",
            "--csv",
            "d.csv",
        ],
    );
    let text = fs::read_to_string(p.join("d.json")).unwrap();
    let report = Report::from_json(&text).unwrap();
    assert_eq!(report.to_json().unwrap(), text);
    for b in &report.blocks {
        assert_eq!(b.raw_std_gap(), 0.0);
        assert_eq!(b.calibrated_log_rms_gap(), 0.0);
    }
    assert_eq!(report.rollout.unwrap().divergence.unwrap().calibrated, 0.0);
    assert!(report.convergence.unwrap().slope.unwrap() >= 1.8);
    let csv = fs::read_to_string(p.join("d.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert!(csv.contains("convergence,,slope,"));
}

#[test]
fn drift_sweep_flag_and_incompatible_models() {
    let dir = fixture();
    let p = dir.path();
    succeed(
        p,
        &[
            "drift",
            "--teacher",
            "teacher",
            "--student",
            "teacher",
            "--calibrated",
            "teacher",
            "--buffer",
            "buffer",
            "--eps-sweep",
            "0.1,0.01,0.001",
            "--out",
            "d.json",
        ],
    );
    let report = Report::from_json(&fs::read_to_string(p.join("d.json")).unwrap()).unwrap();
    assert_eq!(report.convergence.unwrap().rows.len(), 3);
    succeed(p, &["gen-model", "--dim", "32", "--seed", "5", "--out", "narrow"]);
    assert_eq!(
        code(
            p,
            &[
                "drift",
                "--teacher",
                "teacher",
                "--student",
                "narrow",
                "--calibrated",
                "teacher",
                "--buffer",
                "buffer",
                "--out",
                "e.json"
            ]
        ),
        2
    );
    assert!(!p.join("e.json").exists());
}

#[test]
fn report_merges_and_formats() {
    let dir = fixture();
    let p = dir.path();
    quantize(p, "q", &[]);
    succeed(
        p,
        &[
            "run",
            "--model",
            "q",
            "--fvl-seed",
            "1",
            "--x-seed",
            "2",
            "--out",
            "run.json",
        ],
    );
    let json = succeed(p, &["report", "--in", "q/report.json", "run.json"]);
    let v: Value = serde_json::from_slice(&json).unwrap();
    for key in ["config", "memory", "scalars", "blocks", "rollout", "convergence"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["config"]["sources"].as_array().unwrap().len(), 2);
    let csv = String::from_utf8(succeed(p, &["report", "--in", "q/report.json", "--format", "csv"])).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(code(p, &["report"]), 1);
    assert_eq!(code(p, &["report", "--in", "absent.json"]), 3);
    fs::write(p.join("junk.json"), "{").unwrap();
    assert_eq!(code(p, &["report", "--in", "junk.json"]), 2);
}

#[test]
fn help_and_unknown_commands() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["--help"]), 0);
    assert_eq!(code(dir.path(), &["--version"]), 0);
    assert_eq!(code(dir.path(), &["frobnicate"]), 1);
    assert_eq!(code(dir.path(), &[]), 1);
}
