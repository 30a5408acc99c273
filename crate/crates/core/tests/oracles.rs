use absa_core::graph::Graph;
use absa_core::heads::WordGraph;
use absa_core::tensor::{gemm, MatMut, MatRef};
use absa_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const SHAPES: usize = 120;

fn random(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol * w.abs().max(1.0), "element {i}: {g} vs {w}");
    }
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

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..SHAPES {
        let (m, k, n) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40));
        let (a, b) = (random(&mut rng, m * k), random(&mut rng, k * n));
        let want = naive_matmul(&a, &b, m, k, n);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let got = Tensor::new(vec![m, k], a32)
            .unwrap()
            .matmul(&Tensor::new(vec![k, n], b32).unwrap())
            .unwrap();
        close(&got.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), &want, 1e-5);
        let got = Tensor::new(vec![m, k], a.clone())
            .unwrap()
            .matmul(&Tensor::new(vec![k, n], b.clone()).unwrap())
            .unwrap();
        close(got.data(), &want, 1e-12);
    }
}

#[test]
fn strided_gemm_matches_triple_loop() {
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..SHAPES {
        let (m, k, n) = (rng.gen_range(1..30), rng.gen_range(1..30), rng.gen_range(1..30));
        // a stored as [k, m] and read transposed; c accumulates onto a prior value
        let (at, b, c0) = (
            random(&mut rng, k * m),
            random(&mut rng, k * n),
            random(&mut rng, m * n),
        );
        let a: Vec<f64> = (0..m * k).map(|i| at[(i % k) * m + i / k]).collect();
        let prod = naive_matmul(&a, &b, m, k, n);
        let want: Vec<f64> = prod.iter().zip(&c0).map(|(p, c)| 0.5 * p + 2.0 * c).collect();
        let mut c = c0.clone();
        gemm(
            m,
            k,
            n,
            0.5,
            MatRef::transposed(&at, 0, m),
            MatRef::rows(&b, 0, n),
            2.0,
            MatMut::rows(&mut c, 0, n),
        );
        close(&c, &want, 1e-12);
    }
}

#[test]
fn conv1d_matches_direct_loop() {
    let mut rng = StdRng::seed_from_u64(9);
    for _ in 0..SHAPES {
        let batch = rng.gen_range(1..4);
        let time = rng.gen_range(1..20);
        let width = 2 * rng.gen_range(0..3) + 1;
        let (cin, cout) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let x = random(&mut rng, batch * time * cin);
        let k = random(&mut rng, width * cin * cout);
        let bias = random(&mut rng, cout);
        let half = (width / 2) as isize;
        let mut want = vec![0.0; batch * time * cout];
        for b in 0..batch {
            for t in 0..time {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for d in 0..width {
                        let s = t as isize + d as isize - half;
                        if s < 0 || s >= time as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x[(b * time + s as usize) * cin + c] * k[(d * cin + c) * cout + o];
                        }
                    }
                    want[(b * time + t) * cout + o] = acc;
                }
            }
        }
        let mut g = Graph::<f32>::new();
        let to32 = |v: &[f64], shape: Vec<usize>| Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap();
        let xv = g.constant(to32(&x, vec![batch, time, cin]));
        let kv = g.constant(to32(&k, vec![width, cin, cout]));
        let bv = g.constant(to32(&bias, vec![cout]));
        let y = g.conv1d(xv, kv, bv).unwrap();
        assert_eq!(g.shape(y), &[batch, time, cout]);
        let got: Vec<f64> = g.value(y).data().iter().map(|&v| v as f64).collect();
        close(&got, &want, 1e-5);
    }
}

#[test]
fn normalized_adjacency_matches_dense_formula() {
    let mut rng = StdRng::seed_from_u64(10);
    for _ in 0..SHAPES {
        let n = rng.gen_range(1..16);
        let active: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let edges: Vec<(usize, usize)> = (0..rng.gen_range(0..3 * n))
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();
        // A + I restricted to active nodes, then D^-1/2 (A + I) D^-1/2 by explicit products
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            if active[i] {
                a[i * n + i] = 1.0;
            }
        }
        for &(i, j) in &edges {
            if active[i] && active[j] {
                a[i * n + j] = 1.0;
                a[j * n + i] = 1.0;
            }
        }
        let mut dinv = vec![0.0; n * n];
        for i in 0..n {
            let deg: f64 = (0..n).map(|j| a[i * n + j]).sum();
            if deg > 0.0 {
                dinv[i * n + i] = 1.0 / deg.sqrt();
            }
        }
        let want = naive_matmul(&naive_matmul(&dinv, &a, n, n, n), &dinv, n, n, n);
        let got = WordGraph::from_edges(n, &active, &edges);
        close(&got.adjacency, &want, 1e-12);
    }
}
