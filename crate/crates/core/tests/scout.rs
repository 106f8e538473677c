//! Temporary measurement harness — not part of the suite (all ignored).

use attrinject_core::attribution::Method;
use attrinject_core::pipeline::{
    stage_extract, stage_train_student, stage_train_teacher, ExperimentConfig, HeadMaskKind,
    MapSource, ModelShape, RunDir, StudentSpec, TargetOrigin,
};
use attrinject_core::tape::ComposeOp;
use attrinject_core::train::{AdamConfig, TrainConfig};
use attrinject_core::transformer::Site;

#[test]
#[ignore]
fn scout_shared_student_grid() {
    let mut cfg = ExperimentConfig::desk();
    cfg.task.vocab_words = 96;
    cfg.task.max_len = 12;
    cfg.task.pairs = 600;
    cfg.teacher = ModelShape { d_model: 64, d_ff: 128, heads: 4, enc_layers: 2, dec_layers: 4, max_len: 14 };
    cfg.teacher_train = TrainConfig {
        epochs: 100,
        batch_size: 16,
        adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
        patience: 10,
        seed: 0,
    };
    cfg.methods = vec![Method::Attention, Method::LayerGradientXActivation, Method::GradientShap];

    let dir = std::env::temp_dir().join("attrinject-scout-c9");
    let _ = std::fs::remove_dir_all(&dir);
    let run = RunDir::new(dir);
    run.create().unwrap();
    cfg.save(&run.config()).unwrap();

    let t = std::time::Instant::now();
    let teach = stage_train_teacher(&cfg, &run, |_| {}).unwrap();
    eprintln!(
        "teacher: val_acc {:.3} ({:.0}s)",
        teach.val_accuracy,
        t.elapsed().as_secs_f64()
    );
    let t = std::time::Instant::now();
    stage_extract(&cfg, &run, |_| {}).unwrap();
    eprintln!("extract 3 methods: {:.0}s", t.elapsed().as_secs_f64());

    for (d_model, d_ff, heads) in [(12usize, 24usize, 2usize), (20, 40, 2)] {
        cfg.student = ModelShape { d_model, d_ff, heads, enc_layers: 1, dec_layers: 1, max_len: 14 };
        cfg.student_train = TrainConfig {
            epochs: 60,
            batch_size: 32,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            patience: 0,
            seed: 0,
        };
        let mut sources: Vec<(String, MapSource, u64)> = vec![
            ("base".into(), MapSource::None, 0),
            ("gold".into(), MapSource::GoldAlignment, 0),
            ("rand".into(), MapSource::Random, 0),
        ];
        for method in &cfg.methods {
            for seed in [0u64, 1] {
                sources.push((
                    format!("{}#{seed}", method.name()),
                    MapSource::File { origin: TargetOrigin::Gold, method: *method },
                    seed,
                ));
            }
        }
        let mut line = format!("d{d_model}: ");
        for (label, source, seed) in sources {
            let t = std::time::Instant::now();
            let spec = StudentSpec {
                source,
                op: ComposeOp::Multiply,
                site: Site::EncoderSelf,
                mask: HeadMaskKind::All,
                seed,
            };
            let rec = stage_train_student(&cfg, &run, &spec, |_| {}).unwrap();
            line.push_str(&format!(
                "{label} {:.1} ({:.0}s)  ",
                rec.test_bleu,
                t.elapsed().as_secs_f64()
            ));
            eprintln!("{line}");
        }
        eprintln!("== {line}");
    }
}
