use super::*;
use crate::ingest::{tokenize, TokenSequence, MASK_ID, PAD_ID, VOCAB_SIZE};
use crate::rng::{rng_for, Stream};
use protgo_tensor::check::relative_error;
use rand::Rng;
use std::time::Instant;

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: VOCAB_SIZE,
        max_len: 8,
        num_labels: 4,
        dropout: 0.0,
    }
}

fn random_ids(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = rng_for(seed, Stream::Masking, 99, 0);
    let mut ids = vec![1];
    ids.extend((0..len - 2).map(|_| rng.random_range(5..30)));
    ids.push(2);
    ids
}

fn seq(ids: Vec<u32>) -> TokenSequence {
    let n = ids.len() - 2;
    TokenSequence {
        ids,
        original_length: n,
    }
}

fn zero_all(model: &mut Model) {
    for p in &mut model.params {
        p.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        num_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
    let json = r#"{"num_layers": 2, "bogus": 1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    let cfg: ModelConfig = serde_json::from_str(r#"{"num_layers": 2}"#).unwrap();
    assert_eq!(cfg.d_model, 64);
}

#[test]
fn embeddings_are_additive_and_local() {
    let cfg = small_config();
    let mut model = Model::init(cfg.clone(), 1).unwrap();
    let tokens = seq(random_ids(6, 1));

    let base = model.embed(&tokens).unwrap();
    let seg = model.param_mut("segment_embedding").unwrap();
    for x in &mut seg.data[cfg.d_model..] {
        *x = 123.0;
    }
    assert_eq!(model.embed(&tokens).unwrap(), base);

    let mut other = tokens.clone();
    other.ids[3] = if other.ids[3] == 7 { 8 } else { 7 };
    let changed = model.embed(&other).unwrap();
    for r in 0..tokens.len() {
        assert_eq!(base.row(r) == changed.row(r), r != 3, "row {r}");
    }

    zero_all(&mut model);
    assert!(model
        .embed(&tokens)
        .unwrap()
        .data()
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn embed_rejects_overlong_and_bad_ids() {
    let model = Model::init(small_config(), 1).unwrap();
    let long = seq(random_ids(11, 2));
    assert!(matches!(
        model.embed(&long),
        Err(ModelError::PositionOutOfRange {
            length: 11,
            max: 10
        })
    ));
    let bad = seq(vec![1, 30, 2]);
    assert!(matches!(
        model.embed(&bad),
        Err(ModelError::InvalidToken { id: 30, .. })
    ));
}

fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter()
                .map(move |v| (v - mean) / (var + 1e-12).sqrt())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_sublayers_leave_double_normalised_residual() {
    let cfg = small_config();
    let mut model = Model::init(cfg.clone(), 3).unwrap();
    for p in &mut model.params {
        if p.name.starts_with("layer_0.") && !p.name.ends_with("gamma") {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let ids = random_ids(6, 3);
    let mut g = Graph::eval(&model);
    let x = g.embed(&ids).unwrap();
    let input = g.tape.value(x).data().to_vec();
    let out = g.encoder_layer(0, x, &[true; 6]).unwrap();
    let expected = layer_norm_rows(&layer_norm_rows(&input, 8), 8);
    for (a, b) in g.tape.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn equal_scores_give_uniform_attention() {
    // Zero query/key weights make every score equal, so each output row of
    // the attention is the mean of the unmasked value rows.
    let mut tape = protgo_tensor::Tape::new();
    let zeros = tape.constant(protgo_tensor::Tensor::zeros(&[5, 8]));
    let values: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
    let v = tape.constant(protgo_tensor::Tensor::new(vec![5, 8], values.clone()).unwrap());
    let keep = [true, true, false, true, false];
    let out = tape.attention(zeros, zeros, v, 2, &keep).unwrap();
    for r in 0..5 {
        for c in 0..8 {
            let mean = [0, 1, 3].iter().map(|&k| values[k * 8 + c]).sum::<f64>() / 3.0;
            assert!((tape.value(out).row(r)[c] - mean).abs() < 1e-12);
        }
    }
}

fn padded(ids: &[u32], total: usize) -> TokenSequence {
    let mut t = seq(ids.to_vec());
    t.ids.resize(total, PAD_ID);
    t
}

#[test]
fn padding_does_not_leak_into_logits() {
    let cfg = ModelConfig {
        max_len: 12,
        ..small_config()
    };
    let mut model = Model::init(cfg.clone(), 5).unwrap();
    let ids = random_ids(6, 5);
    let tokens = padded(&ids, 10);
    let before = model.forward_classify(&tokens).unwrap();

    // PAD token embedding row
    let tok = model.param_mut("token_embedding").unwrap();
    for x in &mut tok.data[..cfg.d_model] {
        *x += 7.5;
    }
    assert_eq!(model.forward_classify(&tokens).unwrap(), before);

    // positional rows of the padded tail
    let pos = model.param_mut("positional_embedding").unwrap();
    for x in &mut pos.data[6 * cfg.d_model..10 * cfg.d_model] {
        *x = -3.0;
    }
    assert_eq!(model.forward_classify(&tokens).unwrap(), before);

    let unpadded = model.forward_classify(&seq(ids)).unwrap();
    for (a, b) in unpadded.iter().zip(&before) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pad_rows_do_not_affect_real_rows() {
    let cfg = ModelConfig {
        max_len: 12,
        ..small_config()
    };
    let model = Model::init(cfg, 6).unwrap();
    let ids = padded(&random_ids(5, 6), 9).ids;
    let keep: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
    let run = |ids: &[u32]| {
        let mut g = Graph::eval(&model);
        let x = g.embed(ids).unwrap();
        let y = g.encoder_layer(0, x, &keep).unwrap();
        g.tape.value(y).clone()
    };
    let a = run(&ids);
    let mut flipped = ids.clone();
    flipped[7] = 17;
    let b = run(&flipped);
    for r in 0..5 {
        assert_eq!(a.row(r), b.row(r));
    }
}

#[test]
fn zero_classifier_returns_bias() {
    let mut model = Model::init(small_config(), 7).unwrap();
    model
        .param_mut("classifier.weight")
        .unwrap()
        .data
        .iter_mut()
        .for_each(|x| *x = 0.0);
    let bias = vec![0.5, -1.0, 2.0, 0.0];
    model.param_mut("classifier.bias").unwrap().data = bias.clone();
    for s in 0..3 {
        assert_eq!(
            model
                .forward_classify(&seq(random_ids(4 + s, s as u64)))
                .unwrap(),
            bias
        );
    }
}

#[test]
fn long_sequence_forward_is_fast_and_finite() {
    let model = Model::init(ModelConfig::default(), 8).unwrap();
    let residues: String = "ACDEFGHIKLMNPQRSTVWY".repeat(50);
    let tokens = tokenize(&residues, 1000).unwrap();
    assert_eq!(tokens.len(), 1002);
    let start = Instant::now();
    let logits = model.forward_classify(&tokens).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(logits.len(), 100);
    assert!(logits.iter().all(|x| x.is_finite()));
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
}

#[test]
fn mlm_requires_a_mask() {
    let model = Model::init(small_config(), 9).unwrap();
    let tokens = seq(random_ids(6, 9));
    assert!(matches!(
        model.forward_mlm(&tokens),
        Err(ModelError::NoMaskedPosition)
    ));
    let mut masked = tokens;
    masked.ids[2] = MASK_ID;
    let logits = model.forward_mlm(&masked).unwrap();
    assert_eq!(logits.shape(), &[6, VOCAB_SIZE]);
}

#[test]
fn untrained_mlm_entropy_is_near_uniform() {
    let uniform = (VOCAB_SIZE as f64).ln();
    let cfg = ModelConfig {
        max_len: 32,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..100 {
        let model = Model::init(cfg.clone(), seed).unwrap();
        let mut ids = random_ids(20, seed);
        ids[4] = MASK_ID;
        let logits = model.forward_mlm(&seq(ids)).unwrap();
        for r in 0..logits.shape()[0] {
            let row = logits.row(r);
            let lse = protgo_tensor::log_sum_exp(row);
            let h: f64 = row.iter().map(|&z| -(z - lse).exp() * (z - lse)).sum();
            total += h;
            count += 1;
        }
    }
    let mean = total / count as f64;
    assert!(
        (mean - uniform).abs() < 0.1 * uniform,
        "mean entropy {mean}"
    );
}

#[test]
fn copied_weights_give_identical_logits() {
    let a = Model::init(small_config(), 10).unwrap();
    let mut b = Model::init(small_config(), 11).unwrap();
    let tokens = seq(random_ids(7, 10));
    assert_ne!(
        a.forward_classify(&tokens).unwrap(),
        b.forward_classify(&tokens).unwrap()
    );
    b.params = a.params.clone();
    assert_eq!(
        a.forward_classify(&tokens).unwrap(),
        b.forward_classify(&tokens).unwrap()
    );
}

#[test]
fn freeze_masks() {
    let cfg = ModelConfig::default();
    let mask = FreezeMask::default_for(&cfg);
    let frozen = mask.frozen_groups();
    assert_eq!(
        frozen,
        vec![
            ParamGroup::TokenEmbedding,
            ParamGroup::PositionalEmbedding,
            ParamGroup::SegmentEmbedding,
            ParamGroup::Layer(0),
            ParamGroup::Layer(1),
        ]
    );
    let mut model = Model::init(cfg.clone(), 0).unwrap();
    let all_but_head = FreezeMask::only(&cfg, &[ParamGroup::MlmHead]);
    assert!(matches!(
        model.apply_freeze(all_but_head.clone(), Phase::Finetune),
        Err(ModelError::FrozenClassifier)
    ));
    model.apply_freeze(all_but_head, Phase::Pretrain).unwrap();
    assert!(FreezeMask::from_frozen(&cfg, &[ParamGroup::Layer(4)]).is_err());

    let json = serde_json::to_string(&mask).unwrap();
    assert!(json.contains("\"layer_1\":true"));
    assert_eq!(serde_json::from_str::<FreezeMask>(&json).unwrap(), mask);
    assert_eq!(
        "layer_12".parse::<ParamGroup>().unwrap(),
        ParamGroup::Layer(12)
    );
    assert!("layer_x".parse::<ParamGroup>().is_err());
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let cfg = small_config();
    let mut model = Model::init(cfg.clone(), 12).unwrap();
    model
        .apply_freeze(FreezeMask::default_for(&cfg), Phase::Finetune)
        .unwrap();
    let mut g = Graph::train(&model, None);
    let logits = g.classify(&random_ids(6, 12)).unwrap();
    let loss = g
        .tape
        .bce_with_logits(logits, &[1.0, 0.0, 1.0, 0.0])
        .unwrap();
    g.tape.backward(loss).unwrap();
    for (p, grad) in model.params.iter().zip(g.gradients()) {
        let expect = match p.group {
            ParamGroup::MlmHead => false,
            g => !model.freeze.is_frozen(g),
        };
        assert_eq!(grad.is_some(), expect, "{}", p.name);
    }
}

/// Loss of one forward pass, both heads, for finite-difference checks.
fn total_loss(model: &Model, ids: &[u32], masked: &[u32], targets: &[f64]) -> f64 {
    let mut g = Graph::eval(model);
    let logits = g.classify(ids).unwrap();
    let a = g.tape.bce_with_logits(logits, targets).unwrap();
    let mlm = g.mlm(masked).unwrap();
    let b = g.tape.row_nll(mlm, &[(2, 9), (4, 17)]).unwrap();
    g.tape.value(a).item().unwrap() + g.tape.value(b).item().unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let model = Model::init(small_config(), 13).unwrap();
    let ids = random_ids(6, 13);
    let mut masked = ids.clone();
    masked[2] = MASK_ID;
    masked[4] = MASK_ID;
    let targets = [1.0, 0.0, 0.0, 1.0];

    let mut g = Graph::train(&model, None);
    let logits = g.classify(&ids).unwrap();
    let a = g.tape.bce_with_logits(logits, &targets).unwrap();
    let mlm = g.mlm(&masked).unwrap();
    let b = g.tape.row_nll(mlm, &[(2, 9), (4, 17)]).unwrap();
    let loss = g.tape.add(a, b).unwrap();
    g.tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = g
        .gradients()
        .iter()
        .zip(&model.params)
        .map(|(gr, p)| gr.map_or_else(|| vec![0.0; p.data.len()], <[f64]>::to_vec))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (pi, p) in model.params.iter().enumerate() {
        for i in 0..p.data.len() {
            let orig = p.data[i];
            probe.params[pi].data[i] = orig + h;
            let up = total_loss(&probe, &ids, &masked, &targets);
            probe.params[pi].data[i] = orig - h;
            let down = total_loss(&probe, &ids, &masked, &targets);
            probe.params[pi].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi][i], numeric));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

fn temp_path(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    (dir, path)
}

fn checkpoint_with_optimizer(seed: u64) -> ModelCheckpoint {
    let cfg = small_config();
    let mut model = Model::init(cfg.clone(), seed).unwrap();
    model
        .apply_freeze(FreezeMask::default_for(&cfg), Phase::Finetune)
        .unwrap();
    let mut opt = OptimizerState::zeros(&model);
    opt.step = 17;
    opt.m[3][0] = 0.25;
    opt.v[5][1] = 1e-300;
    let mut ckpt = ModelCheckpoint::new(model);
    ckpt.optimizer = Some(opt);
    ckpt.rng_state = RngState {
        seed,
        epoch: 2,
        step: 17,
    };
    ckpt.metadata.insert("aspect".into(), "MF".into());
    ckpt
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ckpt = checkpoint_with_optimizer(14);
    let (_dir, path) = temp_path("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for (a, b) in back.model.params.iter().zip(&ckpt.model.params) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.data), bits(&b.data));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"PGO1");
}

#[test]
fn checkpoint_errors_are_distinct() {
    let ckpt = checkpoint_with_optimizer(15);
    let bytes = encode_checkpoint(&ckpt).unwrap();

    let err = decode_checkpoint(&bytes[..bytes.len() - 1], None).unwrap_err();
    assert!(matches!(err, ModelError::Truncated));
    assert_eq!(err.to_string(), "truncated checkpoint");
    assert!(matches!(
        decode_checkpoint(&bytes[..8], None),
        Err(ModelError::Truncated)
    ));
    assert!(matches!(
        decode_checkpoint(b"NOPE0000", None),
        Err(ModelError::BadMagic)
    ));

    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
    let bumped = header.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert_eq!(bumped.len(), header.len());
    let mut v2 = bytes.clone();
    v2[12..12 + header_len].copy_from_slice(bumped.as_bytes());
    assert!(matches!(
        decode_checkpoint(&v2, None),
        Err(ModelError::VersionMismatch {
            found: 2,
            expected: 1
        })
    ));

    let (_dir, path) = temp_path("wide.ckpt");
    let wide = ModelCheckpoint::new(Model::init(ModelConfig::default(), 0).unwrap());
    save_checkpoint(&wide, &path).unwrap();
    let narrow = ModelConfig {
        d_model: 32,
        ..ModelConfig::default()
    };
    match load_checkpoint_for(&path, &narrow).unwrap_err() {
        ModelError::ShapeMismatch {
            name,
            expected,
            found,
        } => {
            assert_eq!(name, "token_embedding");
            assert_eq!(expected, vec![30, 32]);
            assert_eq!(found, vec![30, 64]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn reset_classifier_resizes_head() {
    let mut model = Model::init(small_config(), 16).unwrap();
    model.reset_classifier(6, 1).unwrap();
    assert_eq!(model.config.num_labels, 6);
    assert_eq!(model.param("classifier.weight").unwrap().shape, vec![8, 6]);
    assert_eq!(
        model
            .forward_classify(&seq(random_ids(5, 1)))
            .unwrap()
            .len(),
        6
    );
}
