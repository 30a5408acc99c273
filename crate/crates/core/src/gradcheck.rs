//! Finite-difference gradient checking.
//!
//! The numeric derivative uses the fourth-order central stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. A coordinate whose
//! perturbations move any ReLU input across zero or change a max-pool argmax
//! is skipped, since the loss is not differentiable there.

use rand::Rng;

use crate::error::{AbsaError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::stream;
use crate::tensor::{Element, Tensor};

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `name[index]: analytic vs numeric` of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64, coords: usize) -> bool {
        self.checked >= coords && self.max_rel_error < tolerance
    }
}

fn evaluate<T: Element, F>(params: &ParamStore<T>, loss_fn: &F) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Graph<T>, &Bound<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    Ok((g.value(loss).item().to_f64(), g.activation_signature()))
}

/// Compares backpropagated gradients of the scalar built by `loss_fn` with
/// numeric derivatives at `coords` random coordinates. Each coordinate picks
/// a parameter tensor uniformly, then an entry within it.
pub fn check_gradients<T: Element, F>(
    params: &ParamStore<T>,
    coords: usize,
    h: f64,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &Bound<'_, T>) -> Result<Var>,
{
    if params.is_empty() {
        return Err(AbsaError::Config("gradient check over an empty parameter set".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound)?;
    let base_signature = g.activation_signature();
    let grads = g.backward(loss)?;
    let analytic: Vec<_> = bound.vars().iter().map(|&v| grads.tensor(v)).collect();
    drop(bound);

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = stream(seed, 0);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let max_attempts = coords * 50;
    let mut attempts = 0;
    while report.checked < coords && attempts < max_attempts {
        attempts += 1;
        let ti = rng.gen_range(0..names.len());
        let numel = analytic[ti].numel();
        if numel == 0 {
            continue;
        }
        let idx = rng.gen_range(0..numel);
        let original = params.get(&names[ti])?.data()[idx];
        let mut at = |offset: f64| -> Result<(f64, Vec<usize>)> {
            probe.get_mut(&names[ti])?.data_mut()[idx] = T::from_f64(original.to_f64() + offset);
            let out = evaluate(&probe, &loss_fn);
            probe.get_mut(&names[ti])?.data_mut()[idx] = original;
            out
        };
        let mut values = [0.0; 4];
        let mut smooth = true;
        for (slot, offset) in values.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
            let (v, sig) = at(offset)?;
            *slot = v;
            smooth &= sig == base_signature;
        }
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let numeric = (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * h);
        let a = analytic[ti].data()[idx].to_f64();
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("{}[{idx}]: {a:.6e} vs {numeric:.6e}", names[ti]);
        }
    }
    Ok(report)
}

fn projection<T: Element>(numel: usize, seed: u64) -> Tensor<T> {
    let mut rng = stream(seed, 0);
    let scale = 1.0 / (numel as f64).sqrt();
    Tensor::from_fn(&[numel], |_| T::from_f64(rng.gen_range(-1.0..1.0) * scale * 3.0))
}

/// Reduces `out` to a scalar by a fixed pseudo-random projection.
fn project<T: Element>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    let w = projection(n, 0xC0FFEE + n as u64);
    g.weighted_sum(out, &w)
}

fn random_store<T: Element>(inputs: &[(&str, &[usize])], seed: u64) -> ParamStore<T> {
    let mut rng = stream(seed, 1);
    let mut store = ParamStore::new();
    for (name, shape) in inputs {
        store.insert(*name, Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0))));
    }
    store
}

type Case<T> = (
    &'static str,
    Vec<(&'static str, Vec<usize>)>,
    Box<dyn Fn(&mut Graph<T>, &Bound<'_, T>) -> Result<Var>>,
);

fn op_cases<T: Element>() -> Vec<Case<T>> {
    let key_mask = [true, true, false, true, true, true, true, false];
    let pad = [true, true, true, false, true, true, false, false];
    vec![
        (
            "matmul",
            vec![("a", vec![3, 4]), ("b", vec![4, 5])],
            Box::new(|g, p| {
                let y = g.matmul(p.var("a")?, p.var("b")?)?;
                project(g, y)
            }),
        ),
        (
            "add",
            vec![("a", vec![2, 3]), ("b", vec![2, 3])],
            Box::new(|g, p| {
                let y = g.add(p.var("a")?, p.var("b")?)?;
                project(g, y)
            }),
        ),
        (
            "add_bias",
            vec![("x", vec![2, 2, 3]), ("b", vec![3])],
            Box::new(|g, p| {
                let y = g.add_bias(p.var("x")?, p.var("b")?)?;
                project(g, y)
            }),
        ),
        (
            "linear",
            vec![("x", vec![2, 3, 4]), ("w", vec![4, 2]), ("b", vec![2])],
            Box::new(|g, p| {
                let y = g.linear(p.var("x")?, p.var("w")?, p.var("b")?)?;
                project(g, y)
            }),
        ),
        (
            "relu",
            vec![("x", vec![4, 5])],
            Box::new(|g, p| {
                let y = g.relu(p.var("x")?)?;
                project(g, y)
            }),
        ),
        (
            "softmax_rows",
            vec![("x", vec![3, 4])],
            Box::new(|g, p| {
                let y = g.softmax_rows(p.var("x")?)?;
                project(g, y)
            }),
        ),
        (
            "cross_entropy",
            vec![("x", vec![4, 3])],
            Box::new(|g, p| g.cross_entropy(p.var("x")?, &[0, 2, 1, 2])),
        ),
        (
            "conv1d",
            vec![("x", vec![2, 5, 3]), ("k", vec![3, 3, 4]), ("b", vec![4])],
            Box::new(|g, p| {
                let y = g.conv1d(p.var("x")?, p.var("k")?, p.var("b")?)?;
                project(g, y)
            }),
        ),
        (
            "dropout",
            vec![("x", vec![4, 6])],
            Box::new(|g, p| {
                let y = g.dropout(p.var("x")?, 0.3, true, &mut stream(11, 3))?;
                project(g, y)
            }),
        ),
        (
            "layer_norm",
            vec![("x", vec![3, 5]), ("gamma", vec![5]), ("beta", vec![5])],
            Box::new(|g, p| {
                let y = g.layer_norm(p.var("x")?, p.var("gamma")?, p.var("beta")?, 1e-12)?;
                project(g, y)
            }),
        ),
        (
            "attention",
            vec![("q", vec![8, 4]), ("k", vec![8, 4]), ("v", vec![8, 4])],
            Box::new(move |g, p| {
                let y = g.attention(p.var("q")?, p.var("k")?, p.var("v")?, &key_mask, 2, 2)?;
                project(g, y)
            }),
        ),
        (
            "embedding",
            vec![("table", vec![5, 3])],
            Box::new(|g, p| {
                let y = g.embedding(p.var("table")?, &[1, 4, 1, 0])?;
                project(g, y)
            }),
        ),
        (
            "mask_rows",
            vec![("x", vec![2, 4, 3])],
            Box::new(move |g, p| {
                let m: Vec<T> = pad.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
                let y = g.mask_rows(p.var("x")?, &m)?;
                project(g, y)
            }),
        ),
        (
            "max_pool_time",
            vec![("x", vec![2, 4, 3])],
            Box::new(move |g, p| {
                let y = g.max_pool_time(p.var("x")?, &pad)?;
                project(g, y)
            }),
        ),
        (
            "mean_pool_time",
            vec![("x", vec![2, 4, 3])],
            Box::new(move |g, p| {
                let w: Vec<T> = pad.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
                let y = g.mean_pool_time(p.var("x")?, &w)?;
                project(g, y)
            }),
        ),
        (
            "select_rows",
            vec![("x", vec![2, 3, 2])],
            Box::new(|g, p| {
                let y = g.select_rows(p.var("x")?, &[0, 3, 3])?;
                project(g, y)
            }),
        ),
        (
            "propagate",
            vec![("x", vec![2, 3, 2])],
            Box::new(|g, p| {
                let adj = projection::<T>(18, 5).reshape(&[2, 3, 3])?;
                let y = g.propagate(adj, p.var("x")?)?;
                project(g, y)
            }),
        ),
        (
            "reshape",
            vec![("x", vec![2, 6])],
            Box::new(|g, p| {
                let y = g.reshape(p.var("x")?, &[3, 4])?;
                project(g, y)
            }),
        ),
        (
            "sum",
            vec![("x", vec![3, 3])],
            Box::new(|g, p| {
                let y = g.relu(p.var("x")?)?;
                g.sum(y)
            }),
        ),
        (
            "scale",
            vec![("x", vec![3, 2])],
            Box::new(|g, p| {
                let y = g.scale(p.var("x")?, T::from_f64(-1.5))?;
                project(g, y)
            }),
        ),
    ]
}

/// Gradient checks for every graph op on small random inputs.
pub fn op_suite<T: Element>(coords: usize, h: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (i, (name, inputs, build)) in op_cases::<T>().into_iter().enumerate() {
        let shapes: Vec<(&str, &[usize])> = inputs.iter().map(|(n, s)| (*n, s.as_slice())).collect();
        let store = random_store::<T>(&shapes, seed + i as u64);
        out.push((
            name.to_string(),
            check_gradients(&store, coords, h, seed + i as u64, build)?,
        ));
    }
    Ok(out)
}

/// Gradient checks through encoder and head together, one per head kind,
/// on a two-example batch of six-token inputs with dropout active.
pub fn head_suite<T: Element>(coords: usize, h: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::dataset::{Example, Polarity};
    use crate::encoder::{truncated_normal, EncoderConfig};
    use crate::heads::{HeadConfig, HeadKind};
    use crate::model::{Batch, EncoderSpec, Model, ModelConfig, Sample};
    use crate::tokenizer::{encode, Vocab};

    let examples = [
        Example::from_span("good vaccine", 5, 12, Polarity::Positive)?,
        Example::from_span("vaccine awful", 0, 7, Polarity::Negative)?,
    ];
    let vocab = Vocab::from_examples(&examples, 1)?;
    let samples: Vec<Sample> = examples
        .iter()
        .map(|e| {
            Ok(Sample {
                input: encode(e, &vocab, 8)?,
                label: e.label.index(),
                key: String::new(),
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let encoder = EncoderConfig {
        preset: "check".into(),
        layers: 1,
        heads: 2,
        hidden: 4,
        ffn: 8,
        max_len: 8,
        dropout: 0.1,
        vocab_size: vocab.len(),
    };
    let mut out = Vec::new();
    for (i, kind) in HeadKind::ALL.into_iter().enumerate() {
        let mut head = HeadConfig::new(kind, 4);
        head.fcn_hidden = 6;
        head.cnn_channels = 3;
        head.gcn_window = 1;
        let config = ModelConfig {
            encoder: EncoderSpec::Transformer(encoder.clone()),
            head,
        };
        let mut model = Model::<T>::init(config, &mut stream(seed, 1))?;
        // larger weights than the 0.02 init so every path carries signal
        let mut rng = stream(seed + i as u64, 1);
        for (name, t) in model.params.iter_mut() {
            if !name.ends_with("gamma") {
                *t = truncated_normal(t.shape(), 0.6, &mut rng);
            }
        }
        let batch = Batch::new(&refs, &model.config, None)?;
        let m = &model;
        let report = check_gradients(&model.params, coords, h, seed + i as u64, |g, p| {
            let logits = m.logits(g, p, &batch, true, &mut stream(seed, 3))?;
            g.cross_entropy(logits, &batch.labels)
        })?;
        out.push((format!("{kind} head"), report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-8, 2e-8), 1e-8);
        assert_eq!(relative_error(100.0, 101.0), 1.0 / 101.0);
    }

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let report = check_gradients(&store, 20, 1e-3, 1, |g, p| {
            let x = p.var("x")?;
            let row = g.reshape(x, &[1, 3])?;
            let col = g.reshape(x, &[3, 1])?;
            let y = g.matmul(row, col)?;
            g.sum(y)
        })
        .unwrap();
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_error < 1e-9, "{report:?}");

        // scaling a frozen copy breaks the analytic/numeric agreement
        let report = check_gradients(&store, 10, 1e-3, 2, |g, p| {
            let x = p.var("x")?;
            let frozen = g.constant(g.value(x).clone());
            let w = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
            let a = g.weighted_sum(x, &w)?;
            let b = g.weighted_sum(frozen, &w)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.3, "{report:?}");
    }

    #[test]
    fn suites_pass_in_f64() {
        for (name, r) in op_suite::<f64>(50, 1e-4, 7)
            .unwrap()
            .into_iter()
            .chain(head_suite::<f64>(50, 1e-4, 7).unwrap())
        {
            assert!(r.passes(1e-5, 50), "{name}: {r:?}");
        }
    }

    #[test]
    fn kinks_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_f64(&[2], &[1e-6, -1e-6]).unwrap());
        let report = check_gradients(&store, 5, 1e-3, 3, |g, p| {
            let r = g.relu(p.var("x")?)?;
            g.sum(r)
        })
        .unwrap();
        assert_eq!(report.checked, 0);
        assert!(report.skipped > 0);
    }
}
