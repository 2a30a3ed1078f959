//! End-to-end tests that drive the `harmnet` binary the way a user would:
//! every subcommand, the documented exit codes, and the JSON shapes that
//! scripts are expected to parse.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn harmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_of(out: &Output, code: i32) -> String {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn basis_prints_the_exact_dc_filter() {
    let v = json_of(&harmnet(&["basis", "--size", "3"]));
    assert_eq!(v["k"], 3);
    assert_eq!(v["pairs"].as_array().unwrap().len(), 9);
    let filters = v["filters"].as_array().unwrap();
    assert_eq!(filters.len(), 9);
    let dc = &filters[0];
    assert_eq!(dc["u"], 0);
    assert_eq!(dc["v"], 0);
    for cell in dc["values"].as_array().unwrap() {
        // sqrt(1/3)^2 rounds to exactly 1/3 in f64, so the DC filter prints
        // as the exact decimal expansion of 1/3.
        assert_eq!(cell.as_f64().unwrap(), 1.0 / 3.0);
    }
}

#[test]
fn basis_respects_truncation_and_l1_norm() {
    let v = json_of(&harmnet(&["basis", "--size", "3", "--lambda", "2", "--norm", "l1"]));
    assert_eq!(v["pairs"].as_array().unwrap().len(), 3);
    let filters = v["filters"].as_array().unwrap();
    for f in filters {
        let sum: f64 = f["values"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_f64().unwrap().abs())
            .sum();
        assert!((sum - 1.0).abs() < 1e-12, "L1 filters have unit L1 norm");
    }
}

#[test]
fn shift_check_reports_an_integer_delta_and_tiny_residual() {
    let v = json_of(&harmnet(&["shift-check", "--n", "8", "--k", "2", "--z", "0"]));
    assert_eq!(v["delta"], 2);
    assert!(v["residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn shift_check_rejects_fractional_shifts() {
    let out = harmnet(&["shift-check", "--n", "7", "--k", "2", "--z", "0"]);
    let err = stderr_of(&out, 2);
    assert!(err.contains("invalid"), "stderr names the error class: {err}");
}

#[test]
fn account_matches_the_frozen_reference_totals() {
    let v = json_of(&harmnet(&["account", "--arch", "wrn-28-10", "--format", "json"]));
    assert_eq!(v["params_conv"], 36479194);

    let v = json_of(&harmnet(&[
        "account",
        "--arch",
        "wrn-28-10",
        "--format",
        "json",
        "--strategy",
        "uniform",
        "--lambda",
        "3",
    ]));
    assert_eq!(v["params_harm"], 24413914);

    let v = json_of(&harmnet(&[
        "account",
        "--arch",
        "harmnet4",
        "--fc-width",
        "32",
        "--format",
        "json",
    ]));
    assert_eq!(v["params_harm"], 130789);
}

#[test]
fn account_renders_a_table_by_default() {
    let out = harmnet(&["account", "--arch", "cnn2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("conv1"));
    assert!(text.contains("total"));
}

#[test]
fn account_rejects_the_adaptive_strategy() {
    let out = harmnet(&[
        "account",
        "--arch",
        "harmnet4",
        "--strategy",
        "adaptive",
        "--threshold",
        "0.01",
    ]);
    let err = stderr_of(&out, 2);
    assert!(err.contains("trained weights"), "explains why: {err}");
}

#[test]
fn unknown_presets_and_bad_usage_exit_with_code_two() {
    let out = harmnet(&["account", "--arch", "nope"]);
    let err = stderr_of(&out, 2);
    assert!(err.contains("unknown preset"), "lists the problem: {err}");

    // clap usage errors use the same exit code
    let out = harmnet(&["account"]);
    assert_eq!(out.status.code(), Some(2));

    let out = harmnet(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_files_exit_with_code_three() {
    let out = harmnet(&["eval", "--model", "/no/such/file.hnet"]);
    let err = stderr_of(&out, 3);
    assert!(err.contains("error"), "stderr carries the message: {err}");
}

#[test]
fn corrupt_model_files_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.hnet");
    std::fs::write(&bad, b"HARMNET1 but then garbage that is not a manifest").unwrap();
    let out = harmnet(&["eval", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

/// Train a tiny model to a file and return its path.
fn train_tiny(dir: &Path, arch: &str, name: &str) -> String {
    let path = dir.join(name).to_str().unwrap().to_owned();
    let out = harmnet(&[
        "train",
        "--arch",
        arch,
        "--epochs",
        "1",
        "--per-class",
        "6",
        "--test-per-class",
        "4",
        "--batch",
        "8",
        "--out",
        &path,
    ]);
    let v = json_of(&out);
    assert_eq!(v["arch"], arch);
    assert_eq!(v["epochs"].as_array().unwrap().len(), 1);
    path
}

#[test]
fn train_eval_convert_compress_round_trip() {
    let dir = tempfile::tempdir().unwrap();

    // Train a small conventional net and a small harmonic net.
    let cnn = train_tiny(dir.path(), "toy-cnn", "cnn.hnet");
    let harm = train_tiny(dir.path(), "toy-harm", "harm.hnet");

    // Evaluate the saved file on freshly generated data.
    let v = json_of(&harmnet(&["eval", "--model", &cnn, "--per-class", "4"]));
    assert_eq!(v["samples"], 20);
    assert!(v["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["confusion"].as_array().unwrap().len(), 5);

    // Full-spectrum conversion is exact: zero dropped energy.
    let conv = dir.path().join("conv.hnet").to_str().unwrap().to_owned();
    let v = json_of(&harmnet(&["convert", "--model", &cnn, "--out", &conv]));
    assert_eq!(v["total_rss"].as_f64().unwrap(), 0.0);
    let layers: Vec<&str> = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["layer"].as_str().unwrap())
        .collect();
    assert_eq!(layers, ["block1", "block2"]);

    // The converted model evaluates identically to the source (same data seed).
    let a = json_of(&harmnet(&["eval", "--model", &cnn, "--per-class", "4"]));
    let b = json_of(&harmnet(&["eval", "--model", &conv, "--per-class", "4"]));
    assert_eq!(a["accuracy"], b["accuracy"]);
    assert!(
        (a["mean_loss"].as_f64().unwrap() - b["mean_loss"].as_f64().unwrap()).abs() < 1e-5,
        "conversion preserves the forward pass"
    );

    // Spectrum truncation keeps block1 intact (first layer exempt) and
    // shrinks block2 to the three lowest-frequency pairs.
    let small = dir.path().join("small.hnet").to_str().unwrap().to_owned();
    let v = json_of(&harmnet(&[
        "compress", "--model", &harm, "--strategy", "uniform", "--lambda", "2", "--out", &small,
    ]));
    let kept: Vec<(String, u64)> = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| (l["layer"].as_str().unwrap().to_owned(), l["kept"].as_u64().unwrap()))
        .collect();
    assert_eq!(kept, [("block1".to_owned(), 16), ("block2".to_owned(), 3)]);
    assert!(v["total_rss"].as_f64().unwrap() > 0.0);

    // The truncated model still evaluates.
    let v = json_of(&harmnet(&["eval", "--model", &small, "--per-class", "4"]));
    assert_eq!(v["samples"], 20);

    // Adaptive conversion goes through the full pipeline: convert, plan from
    // the converted weights, truncate.
    let adap = dir.path().join("adap.hnet").to_str().unwrap().to_owned();
    let v = json_of(&harmnet(&[
        "convert",
        "--model",
        &cnn,
        "--strategy",
        "adaptive",
        "--threshold",
        "0.01",
        "--out",
        &adap,
    ]));
    assert!(v["truncation"].as_array().unwrap().len() == 2);
    let v = json_of(&harmnet(&["eval", "--model", &adap, "--per-class", "4"]));
    assert_eq!(v["samples"], 20);

    // compress requires a strategy.
    let out = harmnet(&["compress", "--model", &harm, "--out", &small]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_across_runs() {
    let run = || {
        let v = json_of(&harmnet(&[
            "train",
            "--arch",
            "toy-harm",
            "--epochs",
            "2",
            "--per-class",
            "6",
            "--test-per-class",
            "4",
            "--batch",
            "8",
            "--seed",
            "7",
        ]));
        v["epochs"].clone()
    };
    assert_eq!(run(), run(), "same seed, same history");
}

#[test]
fn config_files_fill_unset_flags_but_never_override_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("account.json");
    std::fs::write(&cfg, r#"{"arch": "harmnet4", "fc_width": 32, "format": "json"}"#).unwrap();

    // Everything from the config file.
    let v = json_of(&harmnet(&["account", "--config", cfg.to_str().unwrap()]));
    assert_eq!(v["params_harm"], 130789);

    // A flag on the command line wins over the same key in the file.
    let v = json_of(&harmnet(&[
        "account",
        "--config",
        cfg.to_str().unwrap(),
        "--fc-width",
        "1024",
    ]));
    assert_eq!(v["params_harm"], 1280517);

    // Strategy keys live in the same flat file.
    std::fs::write(
        &cfg,
        r#"{"arch": "wrn-28-10", "format": "json", "strategy": "uniform", "lambda": 3}"#,
    )
    .unwrap();
    let v = json_of(&harmnet(&["account", "--config", cfg.to_str().unwrap()]));
    assert_eq!(v["params_harm"], 24413914);

    // Unknown keys are rejected.
    std::fs::write(&cfg, r#"{"arch": "harmnet4", "typo_key": 1}"#).unwrap();
    let out = harmnet(&["account", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_emits_per_case_timings_and_an_aggregate_ratio() {
    let v = json_of(&harmnet(&[
        "bench", "--batch", "1", "--reps", "1", "--warmup", "0", "--format", "json",
    ]));
    let cases = v["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 7);
    for c in cases {
        assert!(c["twostage_s"].as_f64().unwrap() > 0.0);
        assert!(c["merged_s"].as_f64().unwrap() > 0.0);
        assert!(c["max_diff"].as_f64().unwrap() <= 1e-4);
    }
    assert!(v["aggregate_ratio"].as_f64().unwrap() > 0.0);
}
