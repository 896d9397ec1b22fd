#![allow(dead_code)]

use mmdial::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a small absolute floor so that two near-zero
/// derivatives compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of the scalar produced by `build`, taken
/// with respect to every element of every input.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Vec<Vec<f64>> {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.scalar_value(out)
    };
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[i].len()];
        for (j, gj) in grads.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *gj = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        out.push(grads);
    }
    out
}

/// Largest relative error between backward() and central differences.
pub fn max_grad_error(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)).unwrap())
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let numeric = numeric_grads(inputs, build, 1e-5);
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros = vec![0.0; num.len()];
        let ana = grads.wrt(*v).unwrap_or(&zeros);
        for (a, n) in ana.iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

pub mod oracle;

/// Largest relative error between backward() parameter gradients and
/// central differences of `build`, plus the number of coordinates skipped
/// because the perturbation crossed a ReLU kink.
pub fn param_grad_error(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Graph<f64>) -> Result<Var>,
) -> (f64, usize) {
    let mut g = Graph::with_params(store);
    let out = build(&mut g).unwrap();
    let base_sig = g.activation_signature();
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::with_params(s);
        let out = build(&mut g).unwrap();
        (g.scalar_value(out), g.activation_signature())
    };
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut work = store.clone();
    for id in store.ids() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let ana = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        for (j, a) in ana.iter().enumerate() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (plus, sp) = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let (minus, sm) = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            worst = worst.max(rel_err(*a, (plus - minus) / (2.0 * h)));
        }
    }
    (worst, skipped)
}

/// A synthetic world sized for `ModelConfig::tiny()`.
pub fn tiny_world(seed: u64) -> mmdial::data::SyntheticWorld {
    mmdial::data::SyntheticWorld::new(mmdial::data::SyntheticSpec {
        vocab_size: 60,
        n_attributes: 8,
        n_keywords: 8,
        d_img: 8,
        seed,
        ..Default::default()
    })
    .unwrap()
}
