//! Finite-difference verification of backward().

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DialogueSample, Speaker, Utterance, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::model::{Fusion, Model, ModelConfig};
use crate::params::{normal, ParamStore};
use crate::tensor::{Graph, Var};

/// Pass threshold on the worst relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Derivatives smaller than this in both routes compare as equal.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates whose perturbation moved a ReLU across its kink.
    pub skipped: usize,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOL
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, e) in &self.per_param {
            writeln!(f, "{name:<32} {e:.3e}")?;
        }
        write!(
            f,
            "max relative error {:.3e} ({}) over {} coordinates, {} skipped: {}",
            self.max_rel_error,
            self.worst_param,
            self.checked,
            self.skipped,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Compares backward() gradients of the scalar built by `build` against
/// central differences with step `h` for every coordinate of every
/// trainable parameter.
pub fn check_gradients(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Graph<'_, f64>) -> Result<Var>,
    h: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::with_params(store);
    let out = build(&mut g)?;
    let signature = g.activation_signature();
    let grads = g.backward(out)?;

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::with_params(s);
        let out = build(&mut g)?;
        Ok((g.scalar_value(out), g.activation_signature()))
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped: 0,
        per_param: Vec::new(),
    };
    for id in store.ids() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let (plus, sp) = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let (minus, sm) = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        }
        let name = store.name(id).to_string();
        if worst > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = report.max_rel_error.max(worst);
            report.worst_param.clone_from(&name);
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}

/// Two random dialogues exercising text-only, image-only and mixed turns.
fn probe_samples(config: &ModelConfig, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = RESERVED.len() as u32;
    let v = config.vocab_size as u32;
    let words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(lo..v)).collect() };
    let images = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..config.d_img).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let mut response = words(&mut rng, 3);
    response.push(EOS);
    let first = DialogueSample {
        id: 0,
        context: vec![
            Utterance::new(Speaker::User, words(&mut rng, 3), Vec::new()),
            Utterance::new(Speaker::System, Vec::new(), images(&mut rng, 2)),
        ],
        query: Utterance::new(Speaker::User, words(&mut rng, 2), images(&mut rng, 1)),
        response,
        conversation_start: true,
    };
    let mut response = words(&mut rng, 2);
    response.push(EOS);
    let second = DialogueSample {
        id: 1,
        context: Vec::new(),
        query: Utterance::new(Speaker::User, words(&mut rng, 4), images(&mut rng, 2)),
        response,
        conversation_start: true,
    };
    vec![first, second]
}

/// Full-model check: every parameter, including the history matrix, for
/// the mean token loss over two probe dialogues. Requires a tiny
/// configuration (`d_model ≤ 16`) and `p_net = 0` so that fusion is
/// deterministic.
pub fn grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    config.validate()?;
    if config.d_model > 16 {
        return Err(Error::config(format!(
            "gradient check needs d_model <= 16, got {}",
            config.d_model
        )));
    }
    if config.p_net != 0.0 {
        return Err(Error::config("gradient check needs p_net = 0"));
    }
    let model = Model::<f64>::new(config.clone(), seed)?;
    let samples = probe_samples(config, seed ^ 0x9e37_79b9);
    let tokens: usize = samples.iter().map(|s| s.response.len()).sum();
    let fusion = Fusion::Training {
        p_net: 0.0,
        draws: vec![0.5; config.n_layers],
    };
    let build = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let mut total: Option<Var> = None;
        for s in &samples {
            let views: Vec<_> = s.utterances().map(|u| u.view()).collect();
            let nll = model.response_nll(g, &views, &s.response, &fusion)?;
            total = Some(match total {
                Some(t) => g.add(t, nll)?,
                None => nll,
            });
        }
        g.scale(total.expect("two probe samples"), 1.0 / tokens as f64)
    };
    check_gradients(model.params(), &build, FD_STEP)
}

/// A purely linear model, `sum((x·W + b) ⊙ c)`. Central differences are
/// exact for any step here, so a wide one keeps rounding out of the way.
pub fn linear_toy_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = store.add("w", normal(&mut rng, &[4, 3], 1.0))?;
    let b = store.add("b", normal(&mut rng, &[3], 1.0))?;
    let x = normal::<f64, _>(&mut rng, &[5, 4], 1.0);
    let c = normal::<f64, _>(&mut rng, &[5, 3], 1.0);
    let build = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let xv = g.leaf(x.clone())?;
        let cv = g.leaf(c.clone())?;
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.matmul(xv, wv)?;
        let y = g.add_row(y, bv)?;
        let y = g.mul(y, cv)?;
        g.sum(y)
    };
    check_gradients(&store, &build, 1e-2)
}
