//! End-to-end checks of the `partasm` binary: exit codes, determinism of
//! generated files, evaluation robustness on untrained checkpoints, and
//! PLY export shape.

use partasm_core::model::{AssemblyModel, ModelConfig};
use partasm_core::train::save_checkpoint;
use std::path::Path;
use std::process::{Command, Output};

fn partasm(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_partasm"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    // Keep ambient configuration out of the test environment.
    if !envs.iter().any(|(k, _)| *k == "PARTASM_RUN_DIR") {
        cmd.env_remove("PARTASM_RUN_DIR");
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        noise_dim: 4,
        max_parts: 8,
        n_pc: 16,
        head_hidden: 16,
        use_instance_encoding: true,
    }
}

fn write_tiny_ckpt(path: &Path) {
    let model = AssemblyModel::init(tiny_model_config(), 40).unwrap();
    save_checkpoint(path, &model).unwrap();
}

fn gen_lamps(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let data = dir.join("data.bin");
    let out = partasm(
        &[
            "gen-data",
            "--category",
            "lamp",
            "--n-pc",
            "16",
            "--seed",
            &seed.to_string(),
            "--count",
            &count.to_string(),
            "--out",
            data.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{out:?}");
    data
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_lamps(dir.path(), 4, 7);
    let b_path = dir.path().join("again.bin");
    let out = partasm(
        &[
            "gen-data", "--category", "lamp", "--n-pc", "16", "--seed", "7", "--count", "4",
            "--out", b_path.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success());
    assert!(stdout(&out).contains("config[generator]"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b_path).unwrap());
    let samples = partasm_core::data::load_dataset(&a).unwrap();
    assert_eq!(samples.len(), 4);
    assert!(samples.iter().all(|s| s.parts[0].len() == 16));
}

#[test]
fn bad_flags_exit_with_usage_code_2() {
    let unknown = partasm(&["gen-data", "--definitely-not-a-flag"], &[]);
    assert_eq!(unknown.status.code(), Some(2));
    let missing = partasm(&["gen-data"], &[]); // --out is required
    assert_eq!(missing.status.code(), Some(2));
    let bad_value = partasm(
        &["gen-data", "--category", "spaceship", "--out", "x.bin"],
        &[],
    );
    assert_eq!(bad_value.status.code(), Some(2));
    let no_ckpt_finetune = partasm(
        &["train", "--data", "x.bin", "--mode", "inprocess"],
        &[],
    );
    assert_eq!(no_ckpt_finetune.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1_with_one_line_diagnostic() {
    let out = partasm(
        &["eval", "--data", "/nonexistent/d.bin", "--ckpt", "/nonexistent/m.ckpt"],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "stderr was: {err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn eval_handles_an_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lamps(dir.path(), 3, 11);
    let ckpt = dir.path().join("untrained.ckpt");
    write_tiny_ckpt(&ckpt);
    let run_dir = dir.path().join("run");
    let out = partasm(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--k",
            "1",
            "--run-dir",
            run_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("PA"), "missing metrics in: {text}");
    let report = std::fs::read_to_string(run_dir.join("eval_report.json")).unwrap();
    assert!(report.contains("per_shape"));
}

#[test]
fn assemble_exports_ply_files_with_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lamps(dir.path(), 1, 23);
    let ckpt = dir.path().join("m.ckpt");
    write_tiny_ckpt(&ckpt);
    let out_dir = dir.path().join("ply");
    let out = partasm(
        &[
            "assemble",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert!(out.status.success(), "{out:?}");

    let samples = partasm_core::data::load_dataset(&data).unwrap();
    let expected: usize = samples[0].parts.iter().map(|p| p.len()).sum();
    let mut seen = 0;
    for entry in std::fs::read_dir(&out_dir).unwrap() {
        let path = entry.unwrap().path();
        assert_eq!(path.extension().unwrap(), "ply");
        let text = std::fs::read_to_string(&path).unwrap();
        let declared: usize = text
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .unwrap()
            .parse()
            .unwrap();
        let header_end = text.lines().position(|l| l == "end_header").unwrap();
        let data_lines = text.lines().skip(header_end + 1).count();
        assert_eq!(declared, expected);
        assert_eq!(data_lines, expected);
        // x y z r g b per vertex line.
        let first = text.lines().nth(header_end + 1).unwrap();
        assert_eq!(first.split_whitespace().count(), 6);
        seen += 1;
    }
    assert_eq!(seen, 2, "expected predicted and ground-truth exports");
}

#[test]
fn train_writes_run_artifacts_into_the_env_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lamps(dir.path(), 2, 31);
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "[model]\n\
         d_model = 16\n\
         n_heads = 4\n\
         n_layers = 2\n\
         noise_dim = 4\n\
         max_parts = 8\n\
         n_pc = 16\n\
         head_hidden = 16\n\
         \n\
         [train]\n\
         epochs = 1\n\
         batch_size = 2\n\
         mon_branches = 1\n\
         val_k = 1\n",
    )
    .unwrap();
    let run_dir = dir.path().join("from-env");
    let out = partasm(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ],
        &[("PARTASM_RUN_DIR", run_dir.to_str().unwrap())],
    );
    assert!(out.status.success(), "{out:?}");
    for file in ["config.json", "train_log.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let text = stdout(&out);
    assert!(text.contains("config[train]"));
    assert!(text.contains(&format!("run directory: {}", run_dir.display())));
}

#[test]
fn config_files_with_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lamps(dir.path(), 1, 37);
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nlearning_rte = 0.1\n").unwrap();
    let out = partasm(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));
}

#[test]
fn gradcheck_passes_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(
        &config,
        "[model]\n\
         d_model = 8\n\
         n_heads = 2\n\
         n_layers = 1\n\
         noise_dim = 2\n\
         max_parts = 4\n\
         n_pc = 8\n\
         head_hidden = 8\n",
    )
    .unwrap();
    let out = partasm(
        &[
            "gradcheck",
            "--config",
            config.to_str().unwrap(),
            "--parts",
            "2",
            "--points",
            "8",
            "--per-param",
            "1",
            "--seed",
            "7",
        ],
        &[],
    );
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("max relative error"));
}

#[test]
fn inprocess_eval_reports_per_sample_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lamps(dir.path(), 1, 41);
    let ckpt = dir.path().join("m.ckpt");
    write_tiny_ckpt(&ckpt);
    let out = partasm(
        &[
            "inprocess-eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--limit",
            "1",
        ],
        &[],
    );
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("sample "), "missing per-sample line: {text}");
}
