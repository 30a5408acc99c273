use std::fs;

use absa_core::dataset::{generate_synthetic, stratified_split, SplitSpec};
use absa_core::encoder::{export_precomputed, load_precomputed, truncated_normal, EncoderConfig};
use absa_core::experiment::{load_manifest, run_experiment, ExperimentData, ExperimentSpec};
use absa_core::heads::{HeadConfig, HeadKind};
use absa_core::model::{encode_samples, EncoderSpec, Sample};
use absa_core::rng::stream;
use absa_core::tokenizer::Vocab;
use absa_core::training::{DataSplit, TrainConfig};
use absa_core::AbsaError;

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    vocab: usize,
}

fn splits(n: usize) -> Splits {
    let data = generate_synthetic(n, 60, 21);
    let split = stratified_split(&data, &SplitSpec::default()).unwrap();
    let vocab = Vocab::from_examples(&split.train, 1).unwrap();
    let enc = |x| encode_samples(x, &vocab, 32).unwrap();
    Splits {
        train: enc(&split.train),
        val: enc(&split.val),
        test: enc(&split.test),
        vocab: vocab.len(),
    }
}

fn spec(vocab: usize, heads: Vec<HeadKind>, presets: &[&str]) -> ExperimentSpec {
    ExperimentSpec {
        heads,
        encoders: presets
            .iter()
            .map(|p| {
                EncoderSpec::Transformer(EncoderConfig {
                    vocab_size: vocab,
                    max_len: 32,
                    ..EncoderConfig::preset(p).unwrap()
                })
            })
            .collect(),
        seeds: vec![1, 2],
        train: TrainConfig {
            lr: 1e-3,
            epochs: 2,
            patience: None,
            ..TrainConfig::default()
        },
        head: HeadConfig::new(HeadKind::Fcn, 0),
    }
}

#[test]
fn grid_report_and_resume() {
    let s = splits(90);
    let data = ExperimentData {
        train: DataSplit::<f32>::new(&s.train),
        val: DataSplit::new(&s.val),
        test: DataSplit::new(&s.test),
    };
    let sp = spec(s.vocab, HeadKind::ALL.to_vec(), &["mini", "tiny"]);
    let dir = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let report = run_experiment(&sp, &data, dir.path(), &mut |m| log.push(m.to_string())).unwrap();
    assert_eq!(report.rows.len(), 6);
    let order: Vec<(String, String)> = report
        .rows
        .iter()
        .map(|r| (r.model.clone(), r.encoder.clone()))
        .collect();
    assert_eq!(order[0], ("FCN".to_string(), "mini".to_string()));
    assert_eq!(order[5], ("GCN".to_string(), "tiny".to_string()));
    let text = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(text.lines().count(), 7);
    let json = fs::read(dir.path().join("report.json")).unwrap();
    assert!(dir.path().join("runs/gcn-tiny-seed2.history.json").exists());

    // forget one run, as if interrupted before it finished
    let path = dir.path().join("manifest.json");
    let mut manifest = load_manifest(&path).unwrap().unwrap();
    assert_eq!(manifest.completed.len(), 12);
    manifest.completed.remove("cnn-tiny-seed1");
    fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let mut log = Vec::new();
    run_experiment(&sp, &data, dir.path(), &mut |m| log.push(m.to_string())).unwrap();
    let trained: Vec<&String> = log.iter().filter(|l| l.ends_with(": training")).collect();
    assert_eq!(trained, vec!["cnn-tiny-seed1: training"]);
    assert_eq!(fs::read(dir.path().join("report.json")).unwrap(), json);

    let other = spec(s.vocab, vec![HeadKind::Fcn], &["mini"]);
    let err = run_experiment(&other, &data, dir.path(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, AbsaError::Config(_)));
}

#[test]
fn single_cell_grid() {
    let s = splits(60);
    let data = ExperimentData {
        train: DataSplit::<f32>::new(&s.train),
        val: DataSplit::new(&s.val),
        test: DataSplit::new(&s.test),
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(
        &spec(s.vocab, vec![HeadKind::Cnn], &["mini"]),
        &data,
        dir.path(),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(report.to_text().lines().count(), 2);
}

fn export_random(dir: &std::path::Path, name: &str, samples: &[Sample], d: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut rng = stream(seed, 1);
    let tensors: Vec<_> = samples
        .iter()
        .map(|_| truncated_normal::<f32, _>(&[32, d], 1.0, &mut rng))
        .collect();
    export_precomputed(&path, &tensors).unwrap();
    path
}

#[test]
fn precomputed_features_train_heads_reproducibly() {
    let s = splits(90);
    let dir = tempfile::tempdir().unwrap();
    let d = 48;
    let tr = load_precomputed::<f32>(export_random(dir.path(), "train.emb", &s.train, d, 1), d).unwrap();
    let va = load_precomputed::<f32>(export_random(dir.path(), "val.emb", &s.val, d, 2), d).unwrap();
    let te = load_precomputed::<f32>(export_random(dir.path(), "test.emb", &s.test, d, 3), d).unwrap();
    let data = ExperimentData {
        train: DataSplit::with_features(&s.train, &tr),
        val: DataSplit::with_features(&s.val, &va),
        test: DataSplit::with_features(&s.test, &te),
    };
    let mut sp = spec(s.vocab, HeadKind::ALL.to_vec(), &[]);
    sp.encoders = vec![EncoderSpec::Precomputed {
        name: "random-features".into(),
        hidden: d,
    }];
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("run{i}"));
            run_experiment(&sp, &data, &out, &mut |_| {}).unwrap();
            fs::read(out.join("report.json")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
