//! Transformer decoder over the shared embedding table, teacher-forced
//! likelihood and greedy generation.

use rand::Rng;

use super::config::ModelConfig;
use super::encoder::{ContextEncoding, Fusion};
use super::Model;
use crate::data::{DialogueSample, UtteranceView, BOS, EOS};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, key_mask, positional_encoding, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, Var};

/// One post-norm decoder layer: masked self-attention, cross-attention to
/// the encoder memory, and a feed-forward block, each `LN(x + f(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: &ModelConfig,
    ) -> Result<Self> {
        let (d, h, eps) = (c.d_model, c.n_heads, c.ln_eps);
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, h)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d, eps)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, h)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d, eps)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, c.d_ff)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, eps)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_mask: &[bool],
        memory: Var,
        memory_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, x, x, x, Some(self_mask))?;
        let x = g.add(x, a)?;
        let x = self.self_norm.forward(g, x)?;
        let a = self.cross_attn.forward(g, x, memory, memory, memory_mask)?;
        let x = g.add(x, a)?;
        let x = self.cross_norm.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.ffn_norm.forward(g, x)
    }
}

impl<T: Scalar> Model<T> {
    /// Next-token logits for every prefix position, `len × V`. Row `i`
    /// depends only on `prefix[..=i]` and the memory.
    pub fn decode_logits(&self, g: &mut Graph<'_, T>, prefix: &[u32], memory: Var, memory_mask: &[bool]) -> Result<Var> {
        let c = &self.config;
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must start with BOS"));
        }
        if prefix.len() > c.max_len {
            return Err(Error::contract(format!(
                "decoder prefix of {} tokens exceeds max_len {}",
                prefix.len(),
                c.max_len
            )));
        }
        if g.shape(memory).first().copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyKeys);
        }
        if memory_mask.len() != g.shape(memory)[0] {
            return Err(Error::contract("memory mask length differs from memory rows"));
        }
        let d = c.d_model;
        let table = g.param(self.embedding);
        let e = g.embedding(table, prefix, T::cst((d as f64).sqrt()))?;
        let pe = g.leaf(positional_encoding(prefix.len(), d))?;
        let mut x = g.add(e, pe)?;

        let causal = causal_mask(prefix.len());
        let cross = if memory_mask.iter().all(|&v| v) {
            None
        } else {
            Some(key_mask(prefix.len(), memory_mask))
        };
        for layer in &self.decoder {
            x = layer.forward(g, x, &causal, memory, cross.as_deref())?;
        }
        match self.output {
            Some(w) => {
                let w = g.param(w);
                g.matmul(x, w)
            }
            None => g.matmul_nt(x, table),
        }
    }

    /// Summed teacher-forced negative log-likelihood of `response` (which
    /// must not start with BOS). Returns the scalar loss node.
    pub fn response_nll(
        &self,
        g: &mut Graph<'_, T>,
        utterances: &[UtteranceView<'_>],
        response: &[u32],
        fusion: &Fusion,
    ) -> Result<Var> {
        Ok(self.response_nll_traced(g, utterances, response, fusion)?.0)
    }

    /// [`Model::response_nll`] that also hands back the context encoding.
    pub fn response_nll_traced(
        &self,
        g: &mut Graph<'_, T>,
        utterances: &[UtteranceView<'_>],
        response: &[u32],
        fusion: &Fusion,
    ) -> Result<(Var, ContextEncoding)> {
        if response.is_empty() {
            return Err(Error::contract("empty reference response"));
        }
        let enc = self.encode_context(g, utterances, fusion)?;
        let mut prefix = Vec::with_capacity(response.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&response[..response.len() - 1]);
        let logits = self.decode_logits(g, &prefix, enc.memory, &enc.memory_mask)?;
        Ok((g.cross_entropy(logits, response)?, enc))
    }

    /// `Σ log p(w_i | w_<i, context)` of the sample's reference response,
    /// with inference-mode fusion.
    pub fn log_likelihood(&self, sample: &DialogueSample) -> Result<f64> {
        if sample.response.last() != Some(&EOS) {
            return Err(Error::contract("reference response must end with EOS"));
        }
        let views: Vec<UtteranceView<'_>> = sample.utterances().map(|u| u.view()).collect();
        let mut g = Graph::with_params(&self.params);
        let nll = self.response_nll(&mut g, &views, &sample.response, &Fusion::Inference)?;
        Ok(-g.scalar_value(nll).as_f64())
    }

    /// Argmax decoding from BOS until EOS (included in the output) or
    /// `max_new_tokens`, capped at `max_len`. Uses no randomness.
    pub fn generate_greedy(&self, utterances: &[UtteranceView<'_>], max_new_tokens: usize) -> Result<Vec<u32>> {
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode_context(&mut g, utterances, &Fusion::Inference)?;
        let limit = max_new_tokens.min(self.config.max_len);
        let mut prefix = vec![BOS];
        let mut out = Vec::with_capacity(limit);
        let v = self.config.vocab_size;
        while out.len() < limit {
            let logits = self.decode_logits(&mut g, &prefix, enc.memory, &enc.memory_mask)?;
            let row = &g.value(logits)[(prefix.len() - 1) * v..prefix.len() * v];
            let next = argmax(row) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(out)
    }

    /// Greedy reply to a stored sample's context and query.
    pub fn respond(&self, sample: &DialogueSample) -> Result<Vec<u32>> {
        let views: Vec<UtteranceView<'_>> = sample.utterances().map(|u| u.view()).collect();
        self.generate_greedy(&views, self.config.max_len)
    }
}

/// Index of the first maximum.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
