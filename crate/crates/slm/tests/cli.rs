//! Integration tests of the command surface: file formats, edge cases,
//! and the verify subcommand, exercised through both the library entry
//! points and the compiled binary.

use std::path::Path;
use std::process::Command;

use slm::cli::{self, SampleOverrides};
use slm::config::{
    DataConfig, EvalConfig, EvalMode, LossConfig, RunConfig, ScheduleConfig, TrainingConfig,
};
use slm::data::{Split, SyntheticKind, SyntheticSpec};
use slm::schedule::ScheduleKind;
use slm::{FixedTokenPredictor, LossKind, PredictorConfig, SamplerConfig};

fn small_config(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        model: PredictorConfig {
            k: 4,
            l: 2,
            class_count: 0,
            time_features: 2,
            hidden: 0,
        },
        schedule: ScheduleConfig {
            k: 4,
            s: 3,
            kind: ScheduleKind::Exponential,
        },
        loss: LossConfig {
            kind: LossKind::Simple,
        },
        training: TrainingConfig {
            lr: 0.05,
            momentum: 0.0,
            batch_size: 8,
            steps: 10,
            seed: 1,
            label_dropout: 0.3,
            log_interval: 5,
            checkpoint_interval: 0,
        },
        data: DataConfig::Synthetic {
            spec: SyntheticSpec {
                k: 4,
                l: 2,
                n: 64,
                law: SyntheticKind::Iid {
                    probs: vec![0.4, 0.3, 0.2, 0.1],
                },
                seed: 2,
                class_count: 0,
            },
        },
        sampling: SamplerConfig {
            steps: 4,
            gamma: 1.0,
            cls: None,
            seed: 3,
        },
        eval: EvalConfig {
            mode: EvalMode::Mc,
            mc_draws: 2,
            max_sequences: 4,
            seed: 4,
            max_states: 1 << 20,
        },
    }
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn zero_step_training_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.training.steps = 0;
    let outcome = cli::cmd_train(&config, None, None).unwrap();

    let lines = read_lines(&outcome.metrics);
    assert_eq!(lines.len(), 1, "metrics should hold the header only");
    assert!(lines[0].contains("\"record\":\"header\""));
    assert!(lines[0].contains(&config.hash().unwrap()));

    // The checkpoint equals the (deterministic) initialization.
    let loaded = slm::checkpoint::load(
        &outcome.checkpoint,
        &config.model,
        Some(&config.hash_bytes().unwrap()),
    )
    .unwrap();
    let fresh = slm::LinearPredictor::new(config.model, config.training.seed).unwrap();
    assert_eq!(loaded.params(), fresh.params());
}

#[test]
fn sampling_zero_count_writes_header_only_and_records_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let outcome = cli::cmd_train(&config, None, None).unwrap();

    let sample_dir = dir.path().join("samples");
    let path = cli::cmd_sample(
        &config,
        &outcome.checkpoint,
        &SampleOverrides {
            count: 0,
            gamma: Some(1.5),
            cls: None,
            seed: None,
        },
        Some(&sample_dir),
    )
    .unwrap();
    let lines = read_lines(&path);
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("\"gamma\":1.5"));
    assert!(lines[0].contains("\"count\":0"));
    assert!(lines[0].contains(&config.hash().unwrap()));
}

#[test]
fn samples_file_has_entropy_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let outcome = cli::cmd_train(&config, None, None).unwrap();
    let sample_dir = dir.path().join("samples");
    let path = cli::cmd_sample(
        &config,
        &outcome.checkpoint,
        &SampleOverrides {
            count: 5,
            gamma: None,
            cls: None,
            seed: Some(8),
        },
        Some(&sample_dir),
    )
    .unwrap();
    let lines = read_lines(&path);
    assert_eq!(lines.len(), 6);
    for line in &lines[1..] {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["record"], "sample");
        assert!(v["token_entropy"].as_f64().unwrap() >= 0.0);
        assert_eq!(v["tokens"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn mismatched_checkpoint_is_rejected_with_header_diff() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(&dir.path().join("a"));
    let outcome = cli::cmd_train(&config, None, None).unwrap();

    let mut other = config.clone();
    other.training.lr = 0.123; // different hash, same model shape
    let err = cli::cmd_sample(
        &other,
        &outcome.checkpoint,
        &SampleOverrides {
            count: 1,
            gamma: None,
            cls: None,
            seed: None,
        },
        Some(&dir.path().join("b")),
    )
    .unwrap_err();
    let message = err.to_string();
    assert!(
        message.contains("config_hash"),
        "diff should name the mismatched field: {message}"
    );
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    std::fs::create_dir_all(dir.path()).unwrap();
    std::fs::write(dir.path().join("run.lock"), "held").unwrap();
    let err = cli::cmd_train(&config, None, None).unwrap_err();
    assert!(err.to_string().contains("locked"));
}

#[test]
fn eval_of_perfect_predictor_on_degenerate_data_is_zero_bpc() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    // All sequences are the constant token 2.
    config.data = DataConfig::Synthetic {
        spec: SyntheticSpec {
            k: 4,
            l: 2,
            n: 16,
            law: SyntheticKind::Iid {
                probs: vec![0.0, 0.0, 1.0, 0.0],
            },
            seed: 5,
            class_count: 0,
        },
    };
    let predictor = FixedTokenPredictor::new(4, vec![2, 2]).unwrap();
    let report = cli::evaluate(&config, &predictor, Split::Test).unwrap();
    assert!(report.bpc.abs() < 1e-12, "bpc {}", report.bpc);
    assert_eq!(report.l_t, 0.0);
}

#[test]
fn gen_data_exports_jsonl_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let path = cli::cmd_gen_data(&config, Some(&dir.path().join("data"))).unwrap();
    let lines = read_lines(&path);
    assert_eq!(lines.len(), 65); // header + 64 rows
    assert!(lines[0].contains("\"record\":\"header\""));
    let row: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert_eq!(row["tokens"].as_array().unwrap().len(), 2);
}

#[test]
fn diverged_training_aborts_but_retains_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.training.lr = 1e9; // saturates the softmax within a step or two
    config.training.steps = 200;
    let err = cli::cmd_train(&config, None, None).unwrap_err();
    let message = err.to_string();
    assert!(
        message.contains("probability") || message.contains("finite"),
        "unexpected abort reason: {message}"
    );
    // The last good parameters must still be on disk and loadable.
    let ckpt = dir.path().join("checkpoint.bin");
    assert!(ckpt.exists());
    slm::checkpoint::load(&ckpt, &config.model, Some(&config.hash_bytes().unwrap())).unwrap();
}

#[test]
fn sampling_is_invariant_to_the_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, config.to_canonical_toml().unwrap()).unwrap();
    let outcome = cli::cmd_train(&config, None, None).unwrap();

    let mut outputs = Vec::new();
    for (threads, sub) in [("1", "t1"), ("4", "t4")] {
        let out = dir.path().join(sub);
        let status = Command::new(env!("CARGO_BIN_EXE_slm"))
            .env("SLM_THREADS", threads)
            .args([
                "sample",
                "--config",
                config_path.to_str().unwrap(),
                "--checkpoint",
                outcome.checkpoint.to_str().unwrap(),
                "--count",
                "32",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .expect("binary runs");
        assert!(status.success());
        outputs.push(std::fs::read(out.join("samples.jsonl")).unwrap());
    }
    assert_eq!(
        outputs[0], outputs[1],
        "samples depend on SLM_THREADS worker count"
    );
}

#[test]
fn verify_subcommand_passes_and_is_fast() {
    let started = std::time::Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_slm"))
        .arg("verify")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        output.status.success(),
        "verify failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
    assert!(
        started.elapsed().as_secs() < 60,
        "verify took {:?}",
        started.elapsed()
    );
}

#[test]
fn binary_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "this is not a config").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_slm"))
        .args(["train", "--config", config_path.to_str().unwrap()])
        .output()
        .expect("binary runs");
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("error"));
}

#[test]
fn corpus_training_round_trips_through_files() {
    // A small end-to-end pass over the corpus path: train on a text file,
    // sample with text output, eval BPC.
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("tiny.txt");
    let text: String = "the quick brown fox jumps over the lazy dog ".repeat(400);
    std::fs::write(&corpus_path, text.as_bytes()).unwrap();
    let len = text.len();

    let out = dir.path().join("run");
    let config = RunConfig {
        output_dir: out.clone(),
        model: PredictorConfig {
            k: 27,
            l: 8,
            class_count: 0,
            time_features: 2,
            hidden: 0,
        },
        schedule: ScheduleConfig {
            k: 27,
            s: 4,
            kind: ScheduleKind::Exponential,
        },
        loss: LossConfig {
            kind: LossKind::Weighted,
        },
        training: TrainingConfig {
            lr: 0.05,
            momentum: 0.0,
            batch_size: 8,
            steps: 20,
            seed: 2,
            label_dropout: 0.3,
            log_interval: 10,
            checkpoint_interval: 0,
        },
        data: DataConfig::Corpus {
            path: corpus_path,
            chunk_length: 8,
            train_end: len * 8 / 10,
            valid_end: len * 9 / 10,
        },
        sampling: SamplerConfig {
            steps: 4,
            gamma: 1.0,
            cls: None,
            seed: 3,
        },
        eval: EvalConfig {
            mode: EvalMode::Mc,
            mc_draws: 2,
            max_sequences: 4,
            seed: 4,
            max_states: 1 << 20,
        },
    };
    let outcome = cli::cmd_train(&config, None, None).unwrap();
    let sample_path = cli::cmd_sample(
        &config,
        &outcome.checkpoint,
        &SampleOverrides {
            count: 3,
            gamma: None,
            cls: None,
            seed: None,
        },
        Some(&dir.path().join("samples")),
    )
    .unwrap();
    let lines = read_lines(&sample_path);
    let sample: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    let text = sample["text"].as_str().unwrap();
    assert_eq!(text.chars().count(), 8);
    assert!(text.chars().all(|c| c == ' ' || c.is_ascii_lowercase()));

    let report = cli::cmd_eval(
        &config,
        &outcome.checkpoint,
        Split::Valid,
        Some(&dir.path().join("eval")),
    )
    .unwrap();
    assert!(report.bpc.is_finite() && report.bpc > 0.0);
    assert_eq!(report.l_t, 0.0);
}
