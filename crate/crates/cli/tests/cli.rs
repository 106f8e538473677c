//! Drives the compiled binary through a miniature run: config file in,
//! artifacts and report out, bad flags rejected.

use attrinject_core::attribution::{AttributionConfig, Method};
use attrinject_core::attributor::AttributorTrainConfig;
use attrinject_core::data::{Reorder, TaskSpec};
use attrinject_core::pipeline::{
    AttributorShape, ExperimentConfig, HeadMaskKind, ModelShape, TargetOrigin,
};
use attrinject_core::tape::ComposeOp;
use attrinject_core::train::{AdamConfig, TrainConfig};
use attrinject_core::transformer::Site;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrinject"))
}

fn tiny_experiment() -> ExperimentConfig {
    let shape = ModelShape {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 6,
    };
    let fast_adam = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    ExperimentConfig {
        task: TaskSpec {
            vocab_words: 8,
            min_len: 2,
            max_len: 4,
            reorder: Reorder::Identity,
            pairs: 96,
            seed: 5,
        },
        valid_frac: 0.15,
        test_frac: 0.15,
        split_seed: 7,
        teacher: shape,
        student: shape,
        attributor: AttributorShape {
            d_model: 16,
            d_ff: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            gate_hidden: 8,
            max_len: 6,
        },
        teacher_train: TrainConfig {
            epochs: 20,
            batch_size: 16,
            patience: 0,
            adam: fast_adam.clone(),
            seed: 0,
        },
        student_train: TrainConfig {
            epochs: 4,
            batch_size: 16,
            patience: 0,
            adam: fast_adam,
            seed: 0,
        },
        attributor_train: AttributorTrainConfig {
            epochs: 2,
            batch_size: 8,
            patience: 0,
            ..AttributorTrainConfig::default()
        },
        methods: vec![Method::Attention],
        operators: vec![ComposeOp::Multiply],
        sites: vec![Site::EncoderSelf],
        head_masks: vec![HeadMaskKind::All],
        target_origin: TargetOrigin::Gold,
        attribution: AttributionConfig::default(),
        seed: 3,
    }
}

fn setup(name: &str) -> (PathBuf, PathBuf) {
    let dir = std::env::temp_dir().join(format!("attrinject-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let exp = dir.join("experiment.json");
    tiny_experiment().save(&exp).unwrap();
    (dir.join("out"), exp)
}

fn run_ok(out: &Path, exp: &Path, args: &[&str]) -> String {
    let result = bin()
        .arg("--quiet")
        .arg("--out")
        .arg(out)
        .arg("--experiment")
        .arg(exp)
        .args(args)
        .output()
        .expect("binary should launch");
    assert!(
        result.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&result.stdout),
        String::from_utf8_lossy(&result.stderr)
    );
    String::from_utf8_lossy(&result.stdout).into_owned()
}

#[test]
fn help_lists_every_stage() {
    let result = bin().arg("--help").output().expect("binary should launch");
    assert!(result.status.success());
    let text = String::from_utf8_lossy(&result.stdout);
    for sub in [
        "train-teacher",
        "extract",
        "train-student",
        "evaluate",
        "train-attributor",
        "sanity",
        "report",
    ] {
        assert!(text.contains(sub), "--help is missing {sub}:\n{text}");
    }
}

#[test]
fn full_miniature_run_through_the_binary() {
    let (out, exp) = setup("flow");
    run_ok(&out, &exp, &["train-teacher"]);
    assert!(out.join("teacher.ckpt").exists());
    assert!(out.join("corpus.json").exists());

    run_ok(&out, &exp, &["extract"]);
    assert!(out.join("attributions/gold.attention.jsonl").exists());

    run_ok(&out, &exp, &["train-student"]); // baseline by default
    let stdout = run_ok(
        &out,
        &exp,
        &[
            "train-student",
            "--maps",
            "attention",
            "--op",
            "multiply",
            "--site",
            "encoder-self",
        ],
    );
    assert!(stdout.contains("test_bleu"), "{stdout}");
    assert!(out
        .join("students/gold.attention.multiply.encoder_self.all.seed3.ckpt")
        .exists());

    let eval_out = run_ok(&out, &exp, &["evaluate", "--maps", "attention"]);
    assert!(eval_out.contains("test_bleu"), "{eval_out}");

    run_ok(&out, &exp, &["train-attributor", "--method", "attention"]);
    assert!(out.join("attributors/gold.attention.ckpt").exists());
    assert!(out.join("attributors/gold.attention.stats.json").exists());

    let report = run_ok(&out, &exp, &["report"]);
    assert!(report.contains("Injection experiment report"), "{report}");
    assert!(out.join("report.txt").exists());
    assert!(out.join("report.json").exists());
    assert!(out.join("manifest.jsonl").exists());
}

#[test]
fn unknown_map_source_fails_with_a_parse_error() {
    let (out, exp) = setup("badflag");
    let result = bin()
        .arg("--out")
        .arg(&out)
        .arg("--experiment")
        .arg(&exp)
        .args(["train-student", "--maps", "nonsense"])
        .output()
        .expect("binary should launch");
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("nonsense"), "{stderr}");
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let (out, exp) = setup("order");
    let result = bin()
        .arg("--out")
        .arg(&out)
        .arg("--experiment")
        .arg(&exp)
        .arg("extract")
        .output()
        .expect("binary should launch");
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("train-teacher"), "{stderr}");
}
