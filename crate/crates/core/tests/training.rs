use absa_core::dataset::generate_synthetic;
use absa_core::encoder::EncoderConfig;
use absa_core::evaluation::evaluate;
use absa_core::heads::HeadKind;
use absa_core::model::{encode_samples, EncoderSpec, Model, ModelConfig, Sample};
use absa_core::rng::set_seed;
use absa_core::tokenizer::Vocab;
use absa_core::training::{train, DataSplit, StopReason, TrainConfig};
use absa_core::AbsaError;

fn corpus(n: usize, seed: u64) -> (Vec<Sample>, usize) {
    let data = generate_synthetic(n, 200, seed);
    let vocab = Vocab::from_examples(&data, 1).unwrap();
    (encode_samples(&data, &vocab, 64).unwrap(), vocab.len())
}

fn model(kind: HeadKind, preset: &str, vocab: usize) -> ModelConfig {
    let enc = EncoderConfig {
        vocab_size: vocab,
        ..EncoderConfig::preset(preset).unwrap()
    };
    ModelConfig::new(EncoderSpec::Transformer(enc), kind)
}

fn smoothed(losses: &[f64]) -> Vec<f64> {
    losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect()
}

fn overfit_config(dropout: f64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 200,
        patience: None,
        seed: 1,
        dropout,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_small_corpus_with_every_head() {
    let (samples, vocab) = corpus(32, 11);
    for kind in HeadKind::ALL {
        let out = train::<f32>(
            &model(kind, "tiny", vocab),
            &overfit_config(0.1),
            DataSplit::new(&samples),
            DataSplit::new(&samples),
        )
        .unwrap();
        let first = out.history.epochs.iter().position(|e| e.val_accuracy == 1.0);
        assert!(first.is_some(), "{kind} never reached 100% train accuracy");
        let acc = evaluate(&out.model, &samples, None).unwrap().accuracy;
        assert_eq!(acc, 1.0, "{kind}: restored best epoch scores {acc}");
    }
}

#[test]
fn smoothed_overfit_loss_never_rises_over_twenty_epochs() {
    // dropout off: the check targets gradient correctness, not regularization noise
    let (samples, vocab) = corpus(32, 11);
    for kind in HeadKind::ALL {
        let out = train::<f32>(
            &model(kind, "tiny", vocab),
            &overfit_config(0.0),
            DataSplit::new(&samples),
            DataSplit::new(&samples),
        )
        .unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
        let m = smoothed(&losses);
        for t in 0..m.len().saturating_sub(20) {
            assert!(
                m[t + 20] <= m[t],
                "{kind}: smoothed loss rose from {} to {} after epoch {}",
                m[t],
                m[t + 20],
                t + 1
            );
        }
    }
}

#[test]
fn same_seed_same_history_and_weights() {
    let (samples, vocab) = corpus(48, 12);
    let (tr, va) = samples.split_at(32);
    let config = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        batch_size: 8,
        seed: 5,
        patience: None,
        ..TrainConfig::default()
    };
    for kind in HeadKind::ALL {
        let mc = model(kind, "mini", vocab);
        let a = train::<f32>(&mc, &config, DataSplit::new(tr), DataSplit::new(va)).unwrap();
        let b = train::<f32>(&mc, &config, DataSplit::new(tr), DataSplit::new(va)).unwrap();
        assert_eq!(a.history.without_timestamps(), b.history.without_timestamps());
        for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            let bits = |t: &absa_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}

#[test]
fn seeds_control_initialization() {
    let (_, vocab) = corpus(8, 1);
    let mc = model(HeadKind::Fcn, "mini", vocab);
    let init = |seed| Model::<f32>::init(mc.clone(), &mut set_seed(seed).init).unwrap();
    assert_eq!(init(3), init(3));
    assert_ne!(init(3), init(4));
}

#[test]
fn frozen_metric_stops_after_patience() {
    let (samples, vocab) = corpus(40, 13);
    let (tr, va) = samples.split_at(30);
    let config = TrainConfig {
        lr: 1e-30,
        epochs: 20,
        patience: Some(5),
        ..TrainConfig::default()
    };
    let out = train::<f64>(
        &model(HeadKind::Fcn, "mini", vocab),
        &config,
        DataSplit::new(tr),
        DataSplit::new(va),
    )
    .unwrap();
    assert_eq!(out.history.stop_reason, StopReason::EarlyStopped);
    assert_eq!(out.history.epochs.len(), 6);
    assert_eq!(out.history.best_epoch, 1);
}

#[test]
fn divergence_names_the_batch() {
    let (samples, vocab) = corpus(40, 14);
    let config = TrainConfig {
        lr: 1e38,
        clip_norm: 1e30,
        epochs: 5,
        batch_size: 4,
        patience: None,
        ..TrainConfig::default()
    };
    let err = train::<f32>(
        &model(HeadKind::Fcn, "mini", vocab),
        &config,
        DataSplit::new(&samples),
        DataSplit::new(&samples),
    )
    .err()
    .expect("training should diverge");
    match err {
        AbsaError::Diverged { epoch, batch } => {
            assert_eq!(epoch, 1);
            assert!((1..10).contains(&batch), "batch {batch}");
            assert!(err.to_string().contains(&format!("batch {batch}")));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn empty_split_is_a_configuration_error() {
    let (samples, vocab) = corpus(8, 15);
    let err = train::<f32>(
        &model(HeadKind::Cnn, "mini", vocab),
        &TrainConfig::default(),
        DataSplit::new(&samples),
        DataSplit::new(&[]),
    )
    .err()
    .unwrap();
    assert!(matches!(err, AbsaError::Config(_)));
}

#[test]
fn checkpoint_reproduces_validation_metrics() {
    let (samples, vocab) = corpus(60, 16);
    let (tr, va) = samples.split_at(40);
    let config = TrainConfig {
        lr: 1e-3,
        epochs: 3,
        patience: None,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    for kind in HeadKind::ALL {
        let out = train::<f32>(
            &model(kind, "mini", vocab),
            &config,
            DataSplit::new(tr),
            DataSplit::new(va),
        )
        .unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        out.model.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        let best = &out.history.epochs[out.history.best_epoch - 1];
        let m = evaluate(&back, va, None).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (best.val_accuracy, best.val_macro_f1));
        assert_eq!(m, evaluate(&out.model, va, None).unwrap());
    }
}
