mod common;

use common::{max_grad_error, random_tensor, rel_err, rng};
use mmdial::{Error, Graph, ParamStore, Result, Tensor, Var};

/// Contracts an arbitrary output against fixed random weights so every
/// output element receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(&mut rng(seed), g.shape(y));
    let w = g.leaf(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = g.constant(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = g.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let c = g.matmul(a, ones).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let inputs = [random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[4, 2])];
    let err = max_grad_error(&inputs, &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.sum(y)
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = g.softmax(x, None).unwrap();
    for &p in g.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
    let y = g.softmax(x, None).unwrap();
    assert!((g.value(y)[0] - 1.0).abs() < 1e-15);
    assert!(g.value(y)[1] < 1e-300 || g.value(y)[1] == 0.0);

    // Scalar oracle: e^i / Σ e^j, evaluated independently.
    let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.softmax(x, None).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, &p) in g.value(y).iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_mask_zeroes() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random_tensor(&mut rng(4), &[3, 5])).unwrap();
    let mask: Vec<bool> = (0..15).map(|i| i % 5 != 2).collect();
    let y = g.softmax(x, Some(&mask)).unwrap();
    for row in g.value(y).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
    }
    let all_masked = vec![false; 15];
    assert!(g.softmax(x, Some(&all_masked)).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(vec![4], vec![1.0; 4]).unwrap();
    let zeros = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let x = g.constant(vec![1, 4], vec![2.5; 4]).unwrap();
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let bias = g.constant(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let x = g.leaf(random_tensor(&mut rng(2), &[3, 4])).unwrap();
    let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
    for row in g.value(y).chunks(4) {
        assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
    }
}

#[test]
fn layer_norm_normalises_rows() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(vec![8], vec![1.0; 8]).unwrap();
    let zeros = g.constant(vec![8], vec![0.0; 8]).unwrap();
    let x = g.leaf(random_tensor(&mut rng(5), &[2, 8])).unwrap();
    // eps = 0 so the statistics are exact.
    let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
    for row in g.value(y).chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_of_simple_losses() {
    let mut g = Graph::<f64>::new();
    let x = g
        .leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap().with_requires_grad(true))
        .unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 4]);

    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), g.value(x));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]).with_requires_grad(true)).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn second_backward_without_zero_grad_doubles() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let grads = {
        let mut g = Graph::with_params(&store);
        let w = g.param(id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let once = g.backward(loss).unwrap().into_param_grads();
        let twice = g.backward(loss).unwrap().into_param_grads();
        (once, twice)
    };
    store.accumulate(&grads.0).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[2.0, 4.0, 6.0]);
    store.accumulate(&grads.1).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, 8.0, 12.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad().unwrap(), &[0.0; 3]);
}

#[test]
fn no_grad_tensors_never_receive_grads() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(random_tensor(&mut rng(1), &[2, 3]).with_requires_grad(true)).unwrap();
    let b = g.leaf(random_tensor(&mut rng(2), &[3, 2])).unwrap();
    let y = g.matmul(a, b).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(a).is_some());
    assert!(grads.wrt(b).is_none());
    assert!(!g.requires_grad(b));
}

#[test]
fn backward_is_linear_over_add() {
    let mut r = rng(9);
    let (xa, xb) = (random_tensor(&mut r, &[3, 3]), random_tensor(&mut r, &[3, 3]));
    let build = |g: &mut Graph<f64>, x: Var, which: u8| -> Result<Var> {
        let a = g.relu(x)?;
        let a = g.sum(a)?;
        let b = g.mul(x, x)?;
        let b = g.mean(b)?;
        match which {
            0 => g.add(a, b),
            1 => Ok(a),
            _ => Ok(b),
        }
    };
    let grad_of = |which: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(xa.clone().with_requires_grad(true)).unwrap();
        let _unused = g.leaf(xb.clone()).unwrap();
        let loss = build(&mut g, x, which).unwrap();
        g.backward(loss).unwrap().wrt(x).unwrap().to_vec()
    };
    let joint = grad_of(0);
    let split: Vec<f64> = grad_of(1).iter().zip(grad_of(2)).map(|(a, b)| a + b).collect();
    for (a, b) in joint.iter().zip(&split) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(21);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(random_tensor(&mut r, &[4, 6])).unwrap();
        let b = g.leaf(random_tensor(&mut r, &[6, 6])).unwrap();
        let y = g.matmul(a, b).unwrap();
        let y = g.softmax(y, None).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 2], vec![1e308, 1e308]).unwrap();
    assert!(matches!(g.add(x, x), Err(Error::NonFinite { .. })));
}

#[test]
fn embedding_scatter_adds_repeated_rows() {
    let mut g = Graph::<f64>::new();
    let table = g.leaf(random_tensor(&mut rng(3), &[5, 2]).with_requires_grad(true)).unwrap();
    let e = g.embedding(table, &[1, 3, 1], 2.0).unwrap();
    assert_eq!(g.shape(e), &[3, 2]);
    let loss = g.sum(e).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(table).unwrap(), &[0.0, 0.0, 4.0, 4.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    assert!(matches!(g.embedding(table, &[5], 1.0), Err(Error::Data(_))));
}

#[test]
fn cross_entropy_of_uniform_logits() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(vec![3, 7], vec![0.25; 21]).unwrap();
    let nll = g.cross_entropy(logits, &[0, 4, 6]).unwrap();
    assert!((g.scalar_value(nll) - 3.0 * 7f64.ln()).abs() < 1e-12);
}

/// Every differentiable op, over 20 random seeds and small random shapes.
#[test]
fn every_op_passes_gradient_check_over_seeds() {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        use rand::Rng;
        let m = r.random_range(1..4);
        let k = r.random_range(1..5);
        let n = r.random_range(1..4);
        let cases: Vec<Case> = vec![
            ("matmul", vec![vec![m, k], vec![k, n]], Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })),
            ("matmul_nt", vec![vec![m, k], vec![n, k]], Box::new(move |g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })),
            ("transpose", vec![vec![m, k]], Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                weighted_sum(g, y, seed)
            })),
            ("add", vec![vec![m, k], vec![m, k]], Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })),
            ("add_row", vec![vec![m, k], vec![k]], Box::new(move |g, v| {
                let y = g.add_row(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })),
            ("mul", vec![vec![m, k], vec![m, k]], Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, seed)
            })),
            ("scale", vec![vec![m, k]], Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                weighted_sum(g, y, seed)
            })),
            ("relu", vec![vec![m, k]], Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y, seed)
            })),
            ("softmax", vec![vec![m, k + 1]], Box::new(move |g, v| {
                let y = g.softmax(v[0], None)?;
                weighted_sum(g, y, seed)
            })),
            ("layer_norm", vec![vec![m, k + 1], vec![k + 1], vec![k + 1]], Box::new(move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, seed)
            })),
            ("embedding", vec![vec![5, k]], Box::new(move |g, v| {
                let y = g.embedding(v[0], &[4, 0, 4, 2], 1.5)?;
                weighted_sum(g, y, seed)
            })),
            ("concat_rows", vec![vec![m, k], vec![n, k]], Box::new(move |g, v| {
                let y = g.concat_rows(&[v[0], v[1], v[0]])?;
                weighted_sum(g, y, seed)
            })),
            ("mean", vec![vec![m, k]], Box::new(move |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            })),
            ("cross_entropy", vec![vec![3, k + 2]], Box::new(move |g, v| {
                g.cross_entropy(v[0], &[0, (k + 1) as u32, 1])
            })),
            ("attention", vec![vec![m, 4], vec![n + 1, 4], vec![n + 1, 4]], Box::new(move |g, v| {
                let y = g.attention(v[0], v[1], v[2], 2, None)?;
                weighted_sum(g, y, seed)
            })),
            ("masked_attention", vec![vec![m, 4], vec![n + 1, 4], vec![n + 1, 4]], Box::new(move |g, v| {
                let lk = n + 1;
                let mask: Vec<bool> = (0..m * lk).map(|i| i % lk == 0 || (i / lk + i) % 2 == 0).collect();
                let y = g.attention(v[0], v[1], v[2], 2, Some(&mask))?;
                weighted_sum(g, y, seed)
            })),
        ];
        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
            let err = max_grad_error(&inputs, build.as_ref());
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn self_attention_shares_one_input() {
    let x = random_tensor(&mut rng(77), &[3, 4]);
    let err = max_grad_error(&[x], &|g, v| {
        let y = g.attention(v[0], v[0], v[0], 2, None)?;
        weighted_sum(g, y, 5)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn rel_err_floor_behaves() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!(rel_err(1.0, 1.0 + 1e-9) < 1e-8);
}
