//! End-to-end tests of the embedkit binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_embedkit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn embedkit")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

fn write_tiny_encoder_config(path: &Path) {
    fs::write(
        path,
        "[encoder]\nvocab_size = 257\nmodel_dim = 16\nn_layers = 1\nn_heads = 2\nmax_seq_len = 32\nembedding_dim = 8\n",
    )
    .unwrap();
}

const GEN_ARGS: &[&str] = &[
    "gen-data",
    "--seed",
    "7",
    "--n-classes",
    "6",
    "--samples-per-class",
    "8",
    "--vocab-size",
    "60",
    "--tokens-per-doc",
    "4",
];

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run(&[GEN_ARGS, &["--out", dir.path().to_str().unwrap()]].concat());
        assert_ok(&out);
    }
    for name in [
        "train.jsonl",
        "queries.jsonl",
        "corpus.jsonl",
        "qrels.tsv",
        "classification.jsonl",
        "labels.jsonl",
    ] {
        assert_eq!(
            read(dir_a.path(), name),
            read(dir_b.path(), name),
            "{name} differs between identical gen-data runs"
        );
    }
    let train = String::from_utf8(read(dir_a.path(), "train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 6 * 8);
}

#[test]
fn gen_data_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--n-classes",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_classes"));
}

#[test]
fn train_zero_steps_writes_initial_checkpoint_only() {
    let data_dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        &[GEN_ARGS, &["--out", data_dir.path().to_str().unwrap()]].concat(),
    ));
    let cfg_path = data_dir.path().join("cfg.toml");
    write_tiny_encoder_config(&cfg_path);
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data_dir.path().join("train.jsonl").to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--steps",
        "0",
    ]);
    assert_ok(&out);
    assert!(out_dir.path().join("checkpoint_00000.ckpt").exists());
    assert!(out_dir.path().join("checkpoint_final.ckpt").exists());
    let csv = String::from_utf8(read(out_dir.path(), "loss.csv")).unwrap();
    assert_eq!(csv, "step,loss\n");
}

#[test]
fn train_repeat_runs_are_identical_and_cam_flag_is_inert_on_distinct_classes() {
    // A dataset where every class id is unique: masking has nothing to mask,
    // so --no-cam must not change anything.
    let data_dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..8 {
        lines.push_str(&format!(
            r#"{{"query":"query {i}","instruction":"find","task_tag":"retrieval","positive":{{"text":"pos {i}","class_id":"p{i}"}},"negatives":[{{"text":"neg {i}","class_id":"n{i}"}}]}}"#
        ));
        lines.push('\n');
    }
    let data = data_dir.path().join("train.jsonl");
    fs::write(&data, lines).unwrap();
    let cfg_path = data_dir.path().join("cfg.toml");
    write_tiny_encoder_config(&cfg_path);

    let mut outputs = Vec::new();
    for args in [&[][..], &[][..], &["--no-cam"][..]] {
        let out_dir = tempfile::tempdir().unwrap();
        let mut cmd = vec![
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.path().to_str().unwrap(),
            "--steps",
            "3",
            "--batch-size",
            "4",
            "--chunk-size",
            "3",
            "--seed",
            "11",
        ];
        cmd.extend_from_slice(args);
        assert_ok(&run(&cmd));
        outputs.push((
            read(out_dir.path(), "loss.csv"),
            read(out_dir.path(), "checkpoint_final.ckpt"),
        ));
    }
    assert_eq!(outputs[0], outputs[1], "repeat runs differ");
    assert_eq!(outputs[0], outputs[2], "--no-cam changed a maskless run");
}

#[test]
fn merge_endpoints_and_self_merge() {
    let data_dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        &[GEN_ARGS, &["--out", data_dir.path().to_str().unwrap()]].concat(),
    ));
    let cfg_path = data_dir.path().join("cfg.toml");
    write_tiny_encoder_config(&cfg_path);

    // two different checkpoints from different seeds, zero steps
    let mut ckpts = Vec::new();
    for seed in ["3", "4"] {
        let out_dir = tempfile::tempdir().unwrap();
        assert_ok(&run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data_dir.path().join("train.jsonl").to_str().unwrap(),
            "--out",
            out_dir.path().to_str().unwrap(),
            "--steps",
            "0",
            "--seed",
            seed,
        ]));
        let kept = data_dir.path().join(format!("ckpt_{seed}.ckpt"));
        fs::copy(out_dir.path().join("checkpoint_final.ckpt"), &kept).unwrap();
        ckpts.push(kept);
    }

    // t=0 returns the first checkpoint bit-for-bit
    let merged = data_dir.path().join("merged_t0.ckpt");
    assert_ok(&run(&[
        "merge",
        ckpts[0].to_str().unwrap(),
        ckpts[1].to_str().unwrap(),
        "--t",
        "0",
        "--out",
        merged.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&merged).unwrap(), fs::read(&ckpts[0]).unwrap());

    // merging a checkpoint with itself returns it at any t
    let merged_self = data_dir.path().join("merged_self.ckpt");
    assert_ok(&run(&[
        "merge",
        ckpts[0].to_str().unwrap(),
        ckpts[0].to_str().unwrap(),
        "--t",
        "0.37",
        "--granularity",
        "whole-model",
        "--out",
        merged_self.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(&merged_self).unwrap(), fs::read(&ckpts[0]).unwrap());
}

#[test]
fn mine_emits_valid_samples() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    fs::write(
        &pairs,
        concat!(
            "{\"query\":\"find the red one\",\"positive_text\":\"red apple\",\"positive_class\":\"fruit\"}\n",
            "{\"query\":\"find the tool\",\"positive_text\":\"steel hammer\",\"positive_class\":null}\n",
        ),
    )
    .unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let mut docs = String::new();
    for i in 0..20 {
        docs.push_str(&format!(
            "{{\"text\":\"candidate document {i}\",\"class_id\":\"c{}\"}}\n",
            i % 5
        ));
    }
    docs.push_str("{\"text\":\"red apple sibling\",\"class_id\":\"fruit\"}\n");
    fs::write(&corpus, docs).unwrap();

    let cfg_path = dir.path().join("cfg.toml");
    write_tiny_encoder_config(&cfg_path);
    let train_out = tempfile::tempdir().unwrap();
    let gen_dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        &[GEN_ARGS, &["--out", gen_dir.path().to_str().unwrap()]].concat(),
    ));
    assert_ok(&run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        gen_dir.path().join("train.jsonl").to_str().unwrap(),
        "--out",
        train_out.path().to_str().unwrap(),
        "--steps",
        "0",
    ]));
    let ckpt = train_out.path().join("checkpoint_final.ckpt");

    let out_path = dir.path().join("mined.jsonl");
    let out = run(&[
        "mine",
        "--pairs",
        pairs.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--margin",
        "0.99",
        "--top-k",
        "3",
        "--pool",
        "21",
        "--instruction",
        "retrieve the matching item",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let mined = fs::read_to_string(&out_path).unwrap();
    assert_eq!(mined.lines().count(), 2);
    for line in mined.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let pos_class = v["positive"]["class_id"].as_str().unwrap();
        for neg in v["negatives"].as_array().unwrap() {
            assert_ne!(neg["class_id"].as_str().unwrap(), pos_class);
        }
        assert_eq!(v["instruction"], "retrieve the matching item");
    }
}

#[test]
fn eval_and_fp8_report_produce_json() {
    let gen_dir = tempfile::tempdir().unwrap();
    assert_ok(&run(
        &[GEN_ARGS, &["--out", gen_dir.path().to_str().unwrap()]].concat(),
    ));
    let cfg_path = gen_dir.path().join("cfg.toml");
    write_tiny_encoder_config(&cfg_path);
    let train_out = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        gen_dir.path().join("train.jsonl").to_str().unwrap(),
        "--out",
        train_out.path().to_str().unwrap(),
        "--steps",
        "2",
        "--batch-size",
        "8",
    ]));
    let ckpt = train_out.path().join("checkpoint_final.ckpt");

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        gen_dir.path().to_str().unwrap(),
        "--k",
        "1,3",
    ]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let recall = &report["retrieval"]["recall_at"];
    assert!(recall["1"].as_f64().unwrap() >= 0.0);
    assert!(recall["3"].as_f64().unwrap() <= 1.0);
    assert!(report["classification"]["accuracy"].as_f64().is_some());

    let report_path = gen_dir.path().join("fp8.json");
    let out = run(&[
        "fp8-report",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bundle",
        gen_dir.path().to_str().unwrap(),
        "--mode",
        "reference",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mode"], "reference");
    assert_eq!(report["mean_delta"].as_f64().unwrap(), 0.0);
    for task in report["per_task"].as_array().unwrap() {
        assert_eq!(task["delta"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn config_file_with_unknown_keys_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "[train]\nlearning_rate = 0.001\nbogus_key = 1\n").unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn missing_input_paths_fail_before_execution() {
    let out = run(&[
        "eval",
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--bundle",
        "/nonexistent/bundle",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}
