//! End-to-end checks of the `stllm` binary: subcommands, artifacts, and the
//! documented exit codes (0 ok, 2 config, 3 data, 4 numerical).

use std::path::Path;
use std::process::{Command, Output};

use st_llm::harness::RunRecord;
use st_llm::metrics::MetricsReport;

fn stllm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stllm"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_config(dir: &Path, data_path: &Path, mode: &str) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "data": {"kind": "binary", "path": data_path},
        "model": {
            "d": 4, "heads": 2, "layers": 2,
            "frozen_layers": 1, "unfrozen_layers": 1,
            "freeze_mode": mode, "n_max": 6, "dropout": 0.0
        },
        "epochs": 2,
        "batch_size": 32,
        "seed": 5,
        "pretrain": {
            "source": {
                "n": 6, "t": 120, "seed": 99,
                "base_level": 80.0, "daily_amp": 40.0,
                "weekly_amp": 10.0, "noise_std": 4.0
            },
            "epochs": 2,
            "seed": 42
        }
    });
    let path = dir.join("exp.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_command_flow_works() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("series.stll");

    // gen-data
    let out = stllm(&[
        "gen-data",
        "--profile",
        "taxi",
        "--n",
        "6",
        "--t",
        "220",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.exists());

    let config = write_config(dir.path(), &data, "NoPretrain");

    // train writes run.json, metrics.json, and a checkpoint
    let run_dir = dir.path().join("run");
    let out = stllm(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(record.epochs_run, 2);
    let metrics: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics.mae.is_finite());
    let ckpt = run_dir.join("checkpoint.stck");
    assert!(ckpt.exists());

    // eval prints a metrics report
    let out = stllm(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let printed: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed.mae.to_bits(), metrics.mae.to_bits());

    // few-shot
    let out = stllm(&[
        "few-shot",
        "--config",
        config.to_str().unwrap(),
        "--fraction",
        "0.2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // zero-shot against a second series
    let other = dir.path().join("other.stll");
    let out = stllm(&[
        "gen-data",
        "--profile",
        "bike",
        "--n",
        "5",
        "--t",
        "220",
        "--seed",
        "8",
        "--out",
        other.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = stllm(&[
        "zero-shot",
        "--config",
        config.to_str().unwrap(),
        "--data",
        other.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let zs: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(zs.mae.is_finite());

    // pretrain then a PFA run on top of it
    let pre_dir = dir.path().join("pre");
    let out = stllm(&[
        "pretrain",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        pre_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pre_ckpt = pre_dir.join("pretrain_l2").join("checkpoint.stck");
    assert!(pre_ckpt.exists());
    let out = stllm(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--freeze-mode",
        "pfa",
        "--pretrained",
        pre_ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // ablate emits the comparison table
    let abl_dir = dir.path().join("abl");
    let out = stllm(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--variants",
        "full,wo_llm",
        "--out-dir",
        abl_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(abl_dir.join("comparison.csv")).unwrap();
    assert!(table.starts_with("tag,mae,rmse,mape_pct,wape_pct"));
    assert_eq!(table.lines().count(), 3);

    // sweep over U = 1 (auto-pretrains into out_dir)
    let sweep_dir = dir.path().join("sweep");
    let out = stllm(&[
        "sweep-u",
        "--config",
        config.to_str().unwrap(),
        "--max-u",
        "1",
        "--out-dir",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sweep_dir.join("comparison.csv").exists());
}

#[test]
fn exit_codes_match_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // 2: unreadable config
    let out = stllm(&["train", "--config", "/definitely/absent.json"]);
    assert_eq!(out.status.code(), Some(2));

    // generate a real config for the data/numerical cases
    let data = dir.path().join("series.stll");
    assert!(stllm(&[
        "gen-data", "--n", "6", "--t", "220", "--seed", "3", "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let config = write_config(dir.path(), &data, "NoPretrain");

    // 3: missing data file
    let out = stllm(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        "/definitely/absent.stll",
    ]);
    assert_eq!(out.status.code(), Some(3));

    // 4: numerical blow-up aborts with a record
    let out = stllm(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--learning-rate",
        "1e200",
        "--out-dir",
        dir.path().join("nan_run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let run: RunRecord = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("nan_run").join("run.json")).unwrap(),
    )
    .unwrap();
    assert!(matches!(
        run.status,
        st_llm::harness::RunStatus::AbortedNumerical { .. }
    ));

    // 2: invalid variant tag
    let out = stllm(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--variants",
        "nonsense",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
