use super::*;
use crate::ingest::{tokenize, RESIDUE_ALPHABET};
use crate::model::{
    load_checkpoint, save_checkpoint, Model, ModelCheckpoint, ModelConfig, ParamGroup,
};
use crate::rng::{rng_for, Stream};
use rand::Rng;

fn config(layers: usize, labels: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        max_len: 40,
        num_labels: labels,
        dropout,
        ..ModelConfig::default()
    }
}

fn random_examples(n: usize, labels: usize, seed: u64) -> Vec<Example> {
    let alphabet: Vec<char> = RESIDUE_ALPHABET.chars().collect();
    let mut rng = rng_for(seed, Stream::Split, 7, 7);
    (0..n)
        .map(|_| {
            let len = rng.random_range(8..24);
            let s: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..25)])
                .collect();
            Example {
                tokens: tokenize(&s, 40).unwrap(),
                labels: (0..labels).map(|_| rng.random_range(0..2) as f64).collect(),
            }
        })
        .collect()
}

fn finetune(epochs: usize, batch: usize, accum: usize, lr: f64) -> TrainMode {
    TrainMode::Finetune(FinetuneConfig {
        epochs,
        batch_size: batch,
        grad_accumulation: accum,
        learning_rate: lr,
        seed: 3,
        frozen_groups: Some(vec![]),
        ..FinetuneConfig::default()
    })
}

fn start(cfg: ModelConfig) -> ModelCheckpoint {
    ModelCheckpoint::new(Model::init(cfg, 1).unwrap())
}

#[test]
fn accumulation_matches_one_large_batch() {
    let data = random_examples(64, 5, 1);
    let cfg = ModelConfig {
        num_layers: 2,
        num_labels: 5,
        max_len: 40,
        ..ModelConfig::default()
    };
    let a = train_loop(
        start(cfg.clone()),
        &data,
        &finetune(10, 8, 4, 1e-3),
        &TrainOptions::default(),
    )
    .unwrap();
    let b = train_loop(
        start(cfg),
        &data,
        &finetune(10, 32, 1, 1e-3),
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(a.losses.len(), 20);
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert!((x.loss - y.loss).abs() <= 1e-10);
    }
    for (p, q) in a
        .checkpoint
        .model
        .params
        .iter()
        .zip(&b.checkpoint.model.params)
    {
        for (x, y) in p.data.iter().zip(&q.data) {
            assert!((x - y).abs() <= 1e-10, "{}", p.name);
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let data = random_examples(12, 3, 2);
    let mode = finetune(3, 2, 2, 1e-3);
    let a = train_loop(
        start(config(2, 3, 0.1)),
        &data,
        &mode,
        &TrainOptions::default(),
    )
    .unwrap();
    let b = train_loop(
        start(config(2, 3, 0.1)),
        &data,
        &mode,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.checkpoint, b.checkpoint);
    let steps: Vec<u64> = a.losses.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=9).collect::<Vec<_>>());
}

#[test]
fn frozen_groups_are_bitwise_constant() {
    let data = random_examples(10, 3, 3);
    let cfg = config(2, 3, 0.1);
    let mode = TrainMode::Finetune(FinetuneConfig {
        epochs: 10,
        batch_size: 1,
        grad_accumulation: 1,
        learning_rate: 1e-2,
        weight_decay: 0.1,
        seed: 4,
        ..FinetuneConfig::default()
    });
    let init = start(cfg.clone());
    let out = train_loop(init.clone(), &data, &mode, &TrainOptions::default()).unwrap();
    assert_eq!(out.losses.len(), 100);
    let mask = crate::model::FreezeMask::default_for(&cfg);
    for (before, after) in init.model.params.iter().zip(&out.checkpoint.model.params) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if mask.is_frozen(before.group) || before.group == ParamGroup::MlmHead {
            assert_eq!(bits(&before.data), bits(&after.data), "{}", before.name);
        } else {
            assert_ne!(before.data, after.data, "{}", before.name);
        }
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = random_examples(10, 3, 4);
    let mode = finetune(4, 2, 1, 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let full = train_loop(
        start(config(2, 3, 0.1)),
        &data,
        &mode,
        &TrainOptions::default(),
    )
    .unwrap();

    let first = train_loop(
        start(config(2, 3, 0.1)),
        &data,
        &mode,
        &TrainOptions {
            max_steps: Some(7),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let resumed = train_loop(
        load_checkpoint(&path).unwrap(),
        &data,
        &mode,
        &TrainOptions::default(),
    )
    .unwrap();

    let mut trace = first.losses.clone();
    trace.extend(resumed.losses);
    assert_eq!(trace, full.losses);
    assert_eq!(resumed.checkpoint.model, full.checkpoint.model);
}

#[test]
fn separable_task_loss_decreases_monotonically() {
    // Label 0 marks sequences made of A, label 1 those made of W.
    let data: Vec<Example> = (0..8)
        .map(|i| {
            let (c, y) = if i % 2 == 0 {
                ('A', [1.0, 0.0])
            } else {
                ('W', [0.0, 1.0])
            };
            Example {
                tokens: tokenize(&c.to_string().repeat(6 + i), 40).unwrap(),
                labels: y.to_vec(),
            }
        })
        .collect();
    let out = train_loop(
        start(config(2, 2, 0.0)),
        &data,
        &finetune(30, 8, 1, 1e-3),
        &TrainOptions::default(),
    )
    .unwrap();
    let losses: Vec<f64> = out.losses.iter().map(|r| r.loss).collect();
    for w in losses[3..].windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn pretraining_lowers_masked_loss() {
    // Strongly periodic sequences are easy to fill in.
    let data: Vec<Example> = (0..16)
        .map(|i| Example {
            tokens: tokenize(&"MKV".repeat(5 + i % 3), 40).unwrap(),
            labels: vec![],
        })
        .collect();
    let mode = TrainMode::Pretrain(PretrainConfig {
        epochs: 15,
        batch_size: 4,
        seed: 5,
        ..PretrainConfig::default()
    });
    let model = Model::init(config(2, 2, 0.0), 2).unwrap();
    let before = evaluate_loss(&model, &data, &mode).unwrap();
    assert!((before - 30f64.ln()).abs() < 0.05, "{before}");
    let out = train_loop(
        ModelCheckpoint::new(model),
        &data,
        &mode,
        &TrainOptions::default(),
    )
    .unwrap();
    let after = evaluate_loss(&out.checkpoint.model, &data, &mode).unwrap();
    assert!(after < before - 1.0, "{before} -> {after}");
    // classifier never enters a pretraining pass
    let init = Model::init(config(2, 2, 0.0), 2).unwrap();
    assert_eq!(
        out.checkpoint.model.param("classifier.weight"),
        init.param("classifier.weight")
    );
}

#[test]
fn loss_log_and_checkpoints_are_written() {
    let data = random_examples(6, 3, 6);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        aspect: Some("MF".into()),
        checkpoint_path: Some(dir.path().join("mf.ckpt")),
        loss_log: Some(dir.path().join("loss.csv")),
        max_steps: None,
    };
    let out = train_loop(
        start(config(1, 3, 0.1)),
        &data,
        &finetune(2, 3, 1, 1e-3),
        &opts,
    )
    .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,epoch,aspect,loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,0,MF,"));
    assert!(lines[4].starts_with("4,1,MF,"));
    let ckpt = load_checkpoint(&dir.path().join("mf.ckpt")).unwrap();
    assert_eq!(ckpt.rng_state.epoch, 2);
    assert_eq!(ckpt.metadata["aspect"], "MF");
    assert_eq!(ckpt.model, out.checkpoint.model);
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let data = random_examples(4, 3, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let opts = TrainOptions {
        checkpoint_path: Some(path.clone()),
        ..TrainOptions::default()
    };
    let mode = finetune(1, 2, 1, 1e-3);
    train_loop(start(config(1, 3, 0.0)), &data, &mode, &opts).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut poisoned = start(config(1, 3, 0.0));
    poisoned.model.param_mut("classifier.bias").unwrap().data[0] = f64::NAN;
    let err = train_loop(poisoned, &data, &finetune(2, 2, 1, 1e-3), &opts).unwrap_err();
    assert!(
        matches!(err, TrainError::NonFiniteLoss { step: 1, .. }),
        "{err}"
    );
    assert_eq!(std::fs::read(&path).unwrap(), good);
}

#[test]
fn config_errors() {
    let data = random_examples(4, 3, 8);
    let bad = TrainMode::Finetune(FinetuneConfig {
        grad_accumulation: 0,
        ..FinetuneConfig::default()
    });
    assert!(matches!(
        train_loop(
            start(config(1, 3, 0.0)),
            &data,
            &bad,
            &TrainOptions::default()
        ),
        Err(TrainError::InvalidConfig(_))
    ));
    let frozen_head = TrainMode::Finetune(FinetuneConfig {
        frozen_groups: Some(vec![ParamGroup::Classifier]),
        ..FinetuneConfig::default()
    });
    assert!(matches!(
        train_loop(
            start(config(1, 3, 0.0)),
            &data,
            &frozen_head,
            &TrainOptions::default()
        ),
        Err(TrainError::Model(
            crate::model::ModelError::FrozenClassifier
        ))
    ));
    assert!(matches!(
        train_loop(
            start(config(1, 4, 0.0)),
            &data,
            &finetune(1, 1, 1, 1e-3),
            &TrainOptions::default()
        ),
        Err(TrainError::TargetLength {
            logits: 4,
            target: 3
        })
    ));
    let json = r#"{"epochs": 2, "unknown_field": 1}"#;
    assert!(serde_json::from_str::<FinetuneConfig>(json).is_err());
    let cfg: PretrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
    assert_eq!(cfg.mask_probability, 0.15);
    assert_eq!(cfg.learning_rate, 0.002);
}
