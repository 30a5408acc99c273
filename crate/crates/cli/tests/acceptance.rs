//! Acceptance criteria, one pass/fail line each.
//!
//! Run with `cargo test --release -p absa-cli --test acceptance`; a single
//! criterion can be selected by number, e.g. `-- 4`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use absa_core::dataset::{generate_synthetic, stratified_split, write_jsonl, SplitSpec};
use absa_core::encoder::{export_precomputed, truncated_normal, EncoderConfig};
use absa_core::evaluation::{aggregate_seeds, experiment_report, ExperimentReport, Metrics, SeedRun};
use absa_core::experiment::{run_experiment, ExperimentData, ExperimentSpec};
use absa_core::gradcheck::{head_suite, op_suite, GradCheckReport};
use absa_core::graph::Graph;
use absa_core::heads::{HeadConfig, HeadKind, WordGraph};
use absa_core::model::{encode_samples, EncoderSpec, ModelConfig, Sample};
use absa_core::rng::stream;
use absa_core::tokenizer::Vocab;
use absa_core::training::{best_epoch, early_stop_check, train, DataSplit, Decision, StopMetric, TrainConfig};
use absa_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

/// Learning rate for the randomly initialized tiny encoder.
const DESK_LR: f64 = 5e-4;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed <= Duration::from_secs(limit_s), || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

// 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut total = 0;
    type Suite = (&'static str, Vec<(String, GradCheckReport)>, f64, usize);
    let runs: [Suite; 4] = [
        (
            "ops f32",
            op_suite::<f32>(50, 1e-2, 1).map_err(|e| e.to_string())?,
            1e-3,
            0,
        ),
        (
            "ops f64",
            op_suite::<f64>(50, 1e-4, 1).map_err(|e| e.to_string())?,
            1e-5,
            1,
        ),
        (
            "heads f32",
            head_suite::<f32>(50, 1e-2, 2).map_err(|e| e.to_string())?,
            1e-3,
            0,
        ),
        (
            "heads f64",
            head_suite::<f64>(50, 1e-4, 2).map_err(|e| e.to_string())?,
            1e-5,
            1,
        ),
    ];
    for (suite, results, tol, slot) in &runs {
        for (name, r) in results {
            check(r.passes(*tol, 50), || {
                format!(
                    "{suite} {name}: {} checked, max rel err {:.2e} at {} (tol {tol:.0e})",
                    r.checked, r.max_rel_error, r.worst
                )
            })?;
            worst[*slot] = worst[*slot].max(r.max_rel_error);
            total += 1;
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "{total} checks x 50 coords, worst rel err f32 {:.1e} f64 {:.1e}",
        worst[0], worst[1]
    ))
}

// 2

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn oracle_suite() -> Outcome {
    const INSTANCES: usize = 200;
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();

    let mut shapes = StdRng::seed_from_u64(3);
    for i in 0..INSTANCES {
        let (m, k, n) = (
            shapes.gen_range(1..40),
            shapes.gen_range(1..40),
            shapes.gen_range(1..40),
        );
        let (a, b) = (uniform(m * k), uniform(k * n));
        let want = naive_matmul(&a, &b, m, k, n);
        let got = Tensor::new(vec![m, k], f32s(&a))
            .and_then(|t| t.matmul(&Tensor::new(vec![k, n], f32s(&b))?))
            .map_err(|e| e.to_string())?;
        for (g, w) in got.data().iter().zip(&want) {
            check(close(*g as f64, *w, 1e-5), || {
                format!("matmul instance {i} ({m}x{k}x{n}): {g} vs {w}")
            })?;
        }
    }

    for i in 0..INSTANCES {
        let (batch, time) = (shapes.gen_range(1..4), shapes.gen_range(1..20));
        let width = 2 * shapes.gen_range(0..3) + 1;
        let (cin, cout) = (shapes.gen_range(1..8), shapes.gen_range(1..8));
        let (x, k, bias) = (uniform(batch * time * cin), uniform(width * cin * cout), uniform(cout));
        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::new(vec![batch, time, cin], f32s(&x)).map_err(|e| e.to_string())?);
        let kv = g.constant(Tensor::new(vec![width, cin, cout], f32s(&k)).map_err(|e| e.to_string())?);
        let bv = g.constant(Tensor::new(vec![cout], f32s(&bias)).map_err(|e| e.to_string())?);
        let y = g.conv1d(xv, kv, bv).map_err(|e| e.to_string())?;
        let got = g.value(y).data();
        let half = (width / 2) as isize;
        for b in 0..batch {
            for t in 0..time {
                for o in 0..cout {
                    let mut want = bias[o];
                    for d in 0..width {
                        let s = t as isize + d as isize - half;
                        if (0..time as isize).contains(&s) {
                            for c in 0..cin {
                                want += x[(b * time + s as usize) * cin + c] * k[(d * cin + c) * cout + o];
                            }
                        }
                    }
                    let v = got[(b * time + t) * cout + o] as f64;
                    check(close(v, want, 1e-5), || {
                        format!("conv1d instance {i} at ({b},{t},{o}): {v} vs {want}")
                    })?;
                }
            }
        }
    }

    for i in 0..INSTANCES {
        let n = shapes.gen_range(1..16);
        let active: Vec<bool> = (0..n).map(|_| shapes.gen_bool(0.8)).collect();
        let edges: Vec<(usize, usize)> = (0..shapes.gen_range(0..3 * n))
            .map(|_| (shapes.gen_range(0..n), shapes.gen_range(0..n)))
            .collect();
        let mut a = vec![0.0; n * n];
        for j in (0..n).filter(|&j| active[j]) {
            a[j * n + j] = 1.0;
        }
        for &(p, q) in edges.iter().filter(|(p, q)| active[*p] && active[*q]) {
            a[p * n + q] = 1.0;
            a[q * n + p] = 1.0;
        }
        let mut dinv = vec![0.0; n * n];
        for j in 0..n {
            let deg: f64 = a[j * n..(j + 1) * n].iter().sum();
            if deg > 0.0 {
                dinv[j * n + j] = 1.0 / deg.sqrt();
            }
        }
        let want = naive_matmul(&naive_matmul(&dinv, &a, n, n, n), &dinv, n, n, n);
        let got = WordGraph::from_edges(n, &active, &edges);
        for (g, w) in got.adjacency.iter().zip(&want) {
            check(close(*g, *w, 1e-12), || {
                format!("normalized adjacency instance {i} (n={n}): {g} vs {w}")
            })?;
        }
    }

    for i in 0..INSTANCES {
        let len = shapes.gen_range(1..60);
        // skewed draws so that some classes are often absent
        let classes = shapes.gen_range(1..=3);
        let gold: Vec<usize> = (0..len).map(|_| shapes.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..len).map(|_| shapes.gen_range(0..3)).collect();
        let m = Metrics::from_pairs(&gold, &pred).map_err(|e| e.to_string())?;
        let correct = gold.iter().zip(&pred).filter(|(g, p)| g == p).count();
        check(m.accuracy == correct as f64 / len as f64, || {
            format!("accuracy instance {i}")
        })?;
        // exact rational macro-F1: sum of 2tp / (2tp + fp + fn) over classes, divided by 3
        let (mut num, mut den) = (0u128, 1u128);
        for c in 0..3 {
            let tp = gold.iter().zip(&pred).filter(|(g, p)| **g == c && **p == c).count() as u128;
            let fp = gold.iter().zip(&pred).filter(|(g, p)| **g != c && **p == c).count() as u128;
            let fnn = gold.iter().zip(&pred).filter(|(g, p)| **g == c && **p != c).count() as u128;
            let (n_c, d_c) = if tp + fp + fnn == 0 {
                (0, 1)
            } else {
                (2 * tp, 2 * tp + fp + fnn)
            };
            check(m.per_class_f1[c] == n_c as f64 / d_c as f64, || {
                format!("F1 of class {c}, instance {i}")
            })?;
            num = num * d_c + n_c * den;
            den *= d_c;
        }
        let want = num as f64 / (3 * den) as f64;
        check(
            (m.macro_f1 - want).abs() <= 4.0 * f64::EPSILON * want.max(f64::MIN_POSITIVE),
            || format!("macro-F1 instance {i}: {} vs {want}", m.macro_f1),
        )?;
    }

    within(start.elapsed(), 30)?;
    Ok(format!(
        "{INSTANCES} instances each of matmul, conv1d, normalized adjacency, accuracy and macro-F1 in {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

// 3 and 4

struct Encoded {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    vocab: usize,
}

fn encode_corpus(n: usize, seed: u64, max_len: usize) -> Result<Encoded, String> {
    let examples = generate_synthetic(n, 200, seed);
    let split = stratified_split(&examples, &SplitSpec::default()).map_err(|e| e.to_string())?;
    let vocab = Vocab::from_examples(&split.train, 1).map_err(|e| e.to_string())?;
    let enc = |x| encode_samples(x, &vocab, max_len).map_err(|e| e.to_string());
    Ok(Encoded {
        train: enc(&split.train)?,
        val: enc(&split.val)?,
        test: enc(&split.test)?,
        vocab: vocab.len(),
    })
}

fn tiny(vocab: usize, max_len: usize) -> EncoderSpec {
    EncoderSpec::Transformer(EncoderConfig {
        vocab_size: vocab,
        max_len,
        ..EncoderConfig::preset("tiny").unwrap()
    })
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let examples = generate_synthetic(32, 200, 11);
    let vocab = Vocab::from_examples(&examples, 1).map_err(|e| e.to_string())?;
    let samples = encode_samples(&examples, &vocab, 32).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        lr: DESK_LR,
        epochs: 200,
        patience: None,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut parts = Vec::new();
    for kind in HeadKind::ALL {
        let mc = ModelConfig::new(tiny(vocab.len(), 32), kind);
        let out = train(&mc, &config, DataSplit::<f32>::new(&samples), DataSplit::new(&samples))
            .map_err(|e| format!("{kind}: {e}"))?;
        let h = &out.history;
        let first = h.epochs.iter().position(|r| r.val_accuracy == 1.0);
        let best = h.epochs[h.best_epoch - 1].val_accuracy;
        check(best == 1.0, || {
            format!("{kind} peaked at {:.1}% training accuracy", 100.0 * best)
        })?;
        parts.push(format!("{kind} 100% at epoch {}", first.unwrap() + 1));
    }
    within(start.elapsed(), 300)?;
    Ok(format!("{} ({:.0} s)", parts.join(", "), start.elapsed().as_secs_f64()))
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let max_len = 32;
    let data = encode_corpus(3000, 2024, max_len)?;
    let spec = ExperimentSpec {
        heads: HeadKind::ALL.to_vec(),
        encoders: vec![tiny(data.vocab, max_len)],
        seeds: vec![1, 2, 3, 4, 5],
        train: TrainConfig {
            lr: DESK_LR,
            ..TrainConfig::default()
        },
        head: HeadConfig::new(HeadKind::Fcn, 0),
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exp = ExperimentData {
        train: DataSplit::<f32>::new(&data.train),
        val: DataSplit::new(&data.val),
        test: DataSplit::new(&data.test),
    };
    let report = run_experiment(&spec, &exp, dir.path(), &mut |_| {}).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for row in &report.rows {
        let floor = if row.model == "FCN" { 90.0 } else { 95.0 };
        parts.push(format!("{} {}", row.model, row.acc.display()));
        if row.acc.mean < floor {
            failures.push(format!("{} mean {:.2}% < {floor}%", row.model, row.acc.mean));
        }
    }
    check(failures.is_empty(), || {
        format!("{}; {}", failures.join(", "), parts.join(", "))
    })?;
    within(start.elapsed(), 1200)?;
    Ok(format!(
        "{} train / {} test, test accuracy {} ({:.0} s)",
        data.train.len(),
        data.test.len(),
        parts.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// 5

/// First epoch at which training would stop, 1-based.
fn stop_epoch(values: &[f64], patience: usize, metric: StopMetric) -> Option<usize> {
    (1..=values.len()).find(|&e| early_stop_check(&values[..e], patience, metric) == Decision::Stop)
}

fn protocol() -> Outcome {
    let acc = StopMetric::ValAccuracy;
    let plateau = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
    check(stop_epoch(&plateau, 5, acc) == Some(7), || {
        "plateau trace did not stop at epoch 7".into()
    })?;
    check(best_epoch(&plateau, acc) == 2, || {
        "plateau trace best epoch is not 2".into()
    })?;
    let rising: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
    check(stop_epoch(&rising, 5, acc).is_none(), || {
        "monotone metric stopped".into()
    })?;
    check(
        early_stop_check(&[0.7, 0.7, 0.6, 0.5, 0.7, 0.65], 5, acc) == Decision::Stop,
        || "0.7 followed by five values <= 0.7 did not stop".into(),
    )?;
    let reset = [0.7, 0.6, 0.6, 0.6, 0.6, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8];
    check(stop_epoch(&reset, 5, acc) == Some(11), || {
        format!(
            "improvement on the 5th epoch did not reset: {:?}",
            stop_epoch(&reset, 5, acc)
        )
    })?;
    check(
        early_stop_check(&[0.6, 0.6, 0.6], 2, acc) == Decision::Stop && best_epoch(&[0.6, 0.6, 0.6], acc) == 1,
        || "ties counted as improvement".into(),
    )?;
    let loss = StopMetric::ValLoss;
    check(
        stop_epoch(&[1.0, 0.9, 0.9, 0.95, 0.9], 3, loss) == Some(5) && best_epoch(&[2.0, 1.0, 1.0, 3.0], loss) == 2,
        || "loss trace".into(),
    )?;

    // hand values: mean 72.97, deviations (+-1.5, +-0.5, 0) give variance 5/4
    let cases: [(&[f64], f64, f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], 3.0, (2.5f64 / 5.0).sqrt()),
        (&[71.47, 72.47, 72.97, 73.47, 74.47], 72.97, (1.25f64 / 5.0).sqrt()),
        (&[0.5, 0.5], 0.5, 0.0),
    ];
    for (values, mean, se) in cases {
        let a = aggregate_seeds(values).map_err(|e| e.to_string())?;
        check(
            (a.mean - mean).abs() <= 1e-9 && (a.std_error - se).abs() <= 1e-9,
            || {
                format!(
                    "aggregate of {values:?}: {} ± {}, expected {mean} ± {se}",
                    a.mean, a.std_error
                )
            },
        )?;
    }
    let a = aggregate_seeds(&[71.47, 72.47, 72.97, 73.47, 74.47]).map_err(|e| e.to_string())?;
    check(a.display() == "72.97 ± 0.50", || format!("display {:?}", a.display()))?;

    let cells: Vec<(String, String)> = ["BERT", "COVID-TWITTER-BERT"]
        .iter()
        .flat_map(|enc| ["FCN", "CNN", "GCN"].map(|m| (m.to_string(), enc.to_string())))
        .collect();
    let run = |seed: u64, correct: usize| SeedRun {
        seed,
        best_epoch: 1,
        epochs_run: 1,
        test: Metrics::from_pairs(&[0, 1, 2, 0], &[0, 1, 2, if correct == 4 { 0 } else { 1 }]).unwrap(),
    };
    let results: BTreeMap<_, _> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), vec![run(1, 4), run(2, 3 + (i % 2))]))
        .collect();
    let report = experiment_report(&cells, &results, "val_accuracy").map_err(|e| e.to_string())?;
    let text = report.to_text();
    let lines: Vec<&str> = text.lines().collect();
    check(lines.len() == 7, || format!("report has {} lines", lines.len()))?;
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    check(header == ["Model", "Encoder", "ACC", "F1"], || {
        format!("header {header:?}")
    })?;
    for (line, (model, enc)) in lines[1..].iter().zip(&cells) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let two_dec = |s: &str| s.split_once('.').is_some_and(|(a, b)| !a.is_empty() && b.len() == 2);
        check(
            f.len() == 8
                && f[0] == model
                && f[1] == enc
                && f[3] == "±"
                && f[6] == "±"
                && [f[2], f[4], f[5], f[7]].iter().all(|s| two_dec(s)),
            || format!("row {line:?}"),
        )?;
    }
    check(lines[1].split_whitespace().nth(2) == Some("87.50"), || {
        format!("first row {:?}", lines[1])
    })?;
    Ok("patience, tie and reset traces; aggregates to 1e-9; 6-row Model x Encoder x ACC x F1 table".into())
}

// 6 and 7

fn absa(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_absa"))
        .args(args)
        .current_dir(dir)
        .env_remove("ABSA_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("absa {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn prepared_dir(n: usize) -> Result<tempfile::TempDir, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_jsonl(dir.path().join("corpus.jsonl"), &generate_synthetic(n, 60, 6)).map_err(|e| e.to_string())?;
    absa(dir.path(), &["prepare", "--data", "corpus.jsonl", "--out", "prep"])?;
    Ok(dir)
}

fn read(path: impl AsRef<Path>) -> Result<Vec<u8>, String> {
    fs::read(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))
}

fn determinism() -> Outcome {
    let dir = prepared_dir(300)?;
    fs::write(
        dir.path().join("run.toml"),
        "[paths]\nprepared = \"prep\"\n\n[model]\nmax_len = 32\n\n[train]\nlr = 1e-3\nepochs = 3\npatience = 2\n\n\
         [experiment]\nheads = [\"fcn\", \"cnn\", \"gcn\"]\npresets = [\"mini\"]\nseeds = [1, 2, 3]\n",
    )
    .map_err(|e| e.to_string())?;
    for out in ["a", "b"] {
        absa(dir.path(), &["experiment", "--config", "run.toml", "--reports", out])?;
    }
    let (a, b) = (
        read(dir.path().join("a/report.json"))?,
        read(dir.path().join("b/report.json"))?,
    );
    check(a == b, || "report.json differs between runs".into())?;
    Ok(format!(
        "3 heads x 3 seeds twice, report.json identical ({} bytes)",
        a.len()
    ))
}

fn precomputed() -> Outcome {
    let dir = prepared_dir(300)?;
    let prep = dir.path().join("prep");
    let features = dir.path().join("features");
    fs::create_dir_all(&features).map_err(|e| e.to_string())?;
    let (len, d) = (32, 48);
    let mut rng = stream(99, 1);
    for name in ["train", "val", "test"] {
        let n = fs::read_to_string(prep.join(format!("{name}.jsonl")))
            .map_err(|e| e.to_string())?
            .lines()
            .count();
        let tensors: Vec<Tensor<f32>> = (0..n).map(|_| truncated_normal(&[len, d], 1.0, &mut rng)).collect();
        export_precomputed(features.join(format!("{name}.emb")), &tensors).map_err(|e| e.to_string())?;
    }
    let common = [
        "--prepared",
        "prep",
        "--features",
        "features",
        "--max-len",
        "32",
        "--lr",
        "1e-3",
        "--epochs",
        "4",
        "--patience",
        "2",
    ];
    let mut checkpoints = Vec::new();
    for kind in ["fcn", "cnn", "gcn"] {
        for run in ["1", "2"] {
            let ck = format!("{kind}-{run}.ckpt");
            let mut args = vec![
                "train",
                "--preset",
                "precomputed",
                "--head",
                kind,
                "--checkpoint",
                &ck,
                "--history",
            ];
            let hist = format!("{kind}-{run}.json");
            args.push(&hist);
            args.extend(common);
            absa(dir.path(), &args)?;
            checkpoints.push(read(dir.path().join(&ck))?);
        }
        let n = checkpoints.len();
        check(checkpoints[n - 1] == checkpoints[n - 2], || {
            format!("{kind} checkpoints differ")
        })?;
    }
    for out in ["a", "b"] {
        let mut args = vec![
            "experiment",
            "--presets",
            "precomputed",
            "--seeds",
            "1,2",
            "--reports",
            out,
        ];
        args.extend(common);
        absa(dir.path(), &args)?;
    }
    let (a, b) = (
        read(dir.path().join("a/report.json"))?,
        read(dir.path().join("b/report.json"))?,
    );
    check(a == b, || "precomputed report.json differs between runs".into())?;
    let report = ExperimentReport::from_json(&String::from_utf8_lossy(&a)).map_err(|e| e.to_string())?;
    check(report.rows.iter().all(|r| r.encoder == "precomputed"), || {
        "encoder label".into()
    })?;
    Ok(format!(
        "D={d} frozen random features: 3 heads trained twice with identical checkpoints and reports"
    ))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("gradient suite", gradient_suite),
        ("oracle suite", oracle_suite),
        ("overfit sanity", overfit),
        ("learnability", learnability),
        ("protocol fidelity", protocol),
        ("determinism", determinism),
        ("precomputed-embedding path", precomputed),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n} ({name}, {secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {n} ({name}, {secs:.1} s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
