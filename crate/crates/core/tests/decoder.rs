mod common;

use common::oracle::{flat, log_softmax_row, OUtt, Oracle, Pick};
use common::rng;
use mmdial::data::{DialogueSample, Speaker, Utterance, UtteranceView, BOS, EOS};
use mmdial::model::Fusion;
use mmdial::{Error, Graph, Model, ModelConfig};
use proptest::prelude::*;
use rand::Rng;

const V: usize = 60;

fn config(tied: bool) -> ModelConfig {
    ModelConfig {
        tie_output: tied,
        ..ModelConfig::tiny()
    }
}

fn oracle_for(model: &Model) -> Oracle<'_> {
    let c = model.config();
    Oracle {
        p: model.params(),
        d: c.d_model,
        heads: c.n_heads,
        layers: c.n_layers,
        eps: c.ln_eps,
        tied: c.tie_output,
    }
}

fn utterance(seed: u64, len: usize, n_img: usize) -> Utterance {
    let mut r = rng(seed);
    let tokens = (0..len).map(|_| r.random_range(5..V as u32)).collect();
    let images = (0..n_img)
        .map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    Utterance::new(Speaker::User, tokens, images)
}

fn sample(seed: u64, response_len: usize) -> DialogueSample {
    let mut r = rng(seed + 1000);
    let mut response: Vec<u32> = (0..response_len).map(|_| r.random_range(5..V as u32)).collect();
    response.push(EOS);
    DialogueSample {
        id: seed,
        context: vec![utterance(seed, 4, 1)],
        query: utterance(seed + 1, 3, 2),
        response,
        conversation_start: true,
    }
}

fn logits(model: &Model, s: &DialogueSample, prefix: &[u32]) -> Vec<f64> {
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let mut g = Graph::with_params(model.params());
    let enc = model.encode_context(&mut g, &views, &Fusion::Inference).unwrap();
    let y = model.decode_logits(&mut g, prefix, enc.memory, &enc.memory_mask).unwrap();
    assert_eq!(g.shape(y), &[prefix.len(), V]);
    g.value(y).to_vec()
}

fn nll(model: &Model, s: &DialogueSample, response: &[u32]) -> f64 {
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let mut g = Graph::with_params(model.params());
    let loss = model.response_nll(&mut g, &views, response, &Fusion::Inference).unwrap();
    g.scalar_value(loss)
}

#[test]
fn logits_are_causal_for_every_prefix_length() {
    let model = Model::<f64>::new(config(true), 1).unwrap();
    let s = sample(2, 3);
    let mut r = rng(3);
    for len in 1..=8 {
        let mut prefix = vec![BOS];
        prefix.extend((1..len).map(|_| r.random_range(5..V as u32)));
        let base = logits(&model, &s, &prefix);
        for j in 1..len {
            let mut changed = prefix.clone();
            changed[j] = if prefix[j] == 7 { 8 } else { 7 };
            let other = logits(&model, &s, &changed);
            for row in 0..len {
                let same = base[row * V..(row + 1) * V] == other[row * V..(row + 1) * V];
                if row < j {
                    assert!(same, "len {len}: row {row} changed after editing token {j}");
                } else if row == j {
                    assert!(!same, "len {len}: row {row} ignored token {j}");
                }
            }
        }
    }
}

#[test]
fn single_token_prefix_gives_one_row() {
    let model = Model::<f64>::new(config(true), 4).unwrap();
    assert_eq!(logits(&model, &sample(5, 2), &[BOS]).len(), V);
}

#[test]
fn bad_prefixes_are_contract_errors() {
    let model = Model::<f64>::new(config(true), 4).unwrap();
    let s = sample(5, 2);
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let mut g = Graph::with_params(model.params());
    let enc = model.encode_context(&mut g, &views, &Fusion::Inference).unwrap();
    let m = (enc.memory, enc.memory_mask.clone());
    assert!(matches!(model.decode_logits(&mut g, &[7, 8], m.0, &m.1), Err(Error::Contract(_))));
    let long = vec![BOS; 13];
    assert!(matches!(model.decode_logits(&mut g, &long, m.0, &m.1), Err(Error::Contract(_))));
}

#[test]
fn logits_match_matrix_oracle() {
    for tied in [true, false] {
        let model = Model::<f64>::new(config(tied), 6).unwrap();
        let s = sample(7, 4);
        let prefix = [BOS, 9, 33, 12];
        let got = logits(&model, &s, &prefix);
        let o = oracle_for(&model);
        let utts: Vec<OUtt> = s
            .utterances()
            .map(|u| OUtt {
                tokens: u.tokens.clone(),
                images: u.image_features.clone(),
            })
            .collect();
        let memory = o.encode(&utts, &[Pick::Mean; 2]).memory;
        let expected = flat(&o.decode_logits(&prefix, &memory));
        let diff = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "tied={tied}: {diff}");
    }
}

#[test]
fn uniform_logits_give_analytic_likelihood() {
    let mut model = Model::<f64>::new(config(true), 8).unwrap();
    let id = model.embedding_param();
    model.params_mut().assign(id, &[0.0; V * 8]).unwrap();
    let s = sample(9, 5);
    let ll = model.log_likelihood(&s).unwrap();
    let expected = -(s.response.len() as f64) * (V as f64).ln();
    assert!((ll - expected).abs() < 1e-9, "{ll} vs {expected}");
}

#[test]
fn doubling_logits_matches_temperature_oracle() {
    let mut model = Model::<f64>::new(config(false), 10).unwrap();
    let s = sample(11, 4);
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(&s.response[..s.response.len() - 1]);
    let base = logits(&model, &s, &prefix);
    let expected: f64 = base
        .chunks(V)
        .zip(&s.response)
        .map(|(row, &t)| {
            let doubled: Vec<f64> = row.iter().map(|x| 2.0 * x).collect();
            log_softmax_row(&doubled)[t as usize]
        })
        .sum();
    let out = model.params().id("output").unwrap();
    let doubled: Vec<f64> = model.params().get(out).data().iter().map(|x| 2.0 * x).collect();
    model.params_mut().assign(out, &doubled).unwrap();
    let ll = model.log_likelihood(&s).unwrap();
    assert!((ll - expected).abs() < 1e-10, "{ll} vs {expected}");
}

#[test]
fn random_responses_are_less_likely_than_preferred_ones() {
    // The model's own greedy continuation stands in for a gold response it
    // prefers; random token sequences of the same length should score worse
    // on average.
    let model = Model::<f64>::new(config(true), 12).unwrap();
    let s = sample(13, 3);
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let preferred = model.generate_greedy(&views, 6).unwrap();
    let gold_nll = nll(&model, &s, &preferred);
    let mut r = rng(14);
    let trials = 100;
    let mean_random: f64 = (0..trials)
        .map(|_| {
            let random: Vec<u32> = (0..preferred.len()).map(|_| r.random_range(0..V as u32)).collect();
            nll(&model, &s, &random)
        })
        .sum::<f64>()
        / trials as f64;
    assert!(mean_random > gold_nll, "{mean_random} <= {gold_nll}");
}

#[test]
fn tied_embedding_feeds_encoder_and_output() {
    let mut model = Model::<f64>::new(config(true), 15).unwrap();
    assert!(model.params().id("output").is_none());
    let s = sample(16, 3);
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let memory = |m: &Model| {
        let mut g = Graph::with_params(m.params());
        let enc = m.encode_context(&mut g, &views, &Fusion::Inference).unwrap();
        g.value(enc.memory).to_vec()
    };
    let (mem0, logits0) = (memory(&model), logits(&model, &s, &[BOS]));
    let id = model.embedding_param();
    let mut table = model.params().get(id).data().to_vec();
    // Touch the row of a query token and the row of an output-only token.
    let q = s.query.tokens[0] as usize;
    table[q * 8] += 0.5;
    table[59 * 8] += 0.5;
    model.params_mut().assign(id, &table).unwrap();
    assert_ne!(memory(&model), mem0);
    let logits1 = logits(&model, &s, &[BOS]);
    assert_ne!(logits1[59], logits0[59]);
}

#[test]
fn greedy_generation_is_deterministic_and_bounded() {
    let model = Model::<f64>::new(config(true), 17).unwrap();
    let s = sample(18, 3);
    let views: Vec<UtteranceView> = s.utterances().map(Utterance::view).collect();
    let a = model.generate_greedy(&views, 12).unwrap();
    let b = model.generate_greedy(&views, 12).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 12);
    assert_eq!(model.generate_greedy(&views, 1).unwrap().len(), 1);
    assert!(model.generate_greedy(&views, 100).unwrap().len() <= 12);
    // Each emitted token is the argmax given its prefix.
    let mut prefix = vec![BOS];
    for &t in &a {
        let l = logits(&model, &s, &prefix);
        let row = &l[(prefix.len() - 1) * V..];
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(row[t as usize], best);
        prefix.push(t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn likelihood_is_a_probability(seed in 0u64..10_000, len in 0usize..8) {
        let model = Model::<f64>::new(config(seed % 2 == 0), seed).unwrap();
        let p = model.log_likelihood(&sample(seed, len)).unwrap().exp();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}
