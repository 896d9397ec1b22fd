//! Non-hierarchical multimodal encoder: per-utterance text and
//! text-enhanced image streams, modality-dropout fusion, and a per-layer
//! history updater whose output seeds the next utterance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::Model;
use crate::data::{UtteranceView, IMGCTX};
use crate::error::{Error, Result};
use crate::layers::{key_mask, positional_encoding, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Which fusion branch a layer took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Text,
    Image,
    Mean,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Text, Branch::Image, Branch::Mean];
}

/// Picks the fusion branch for one uniform draw `u`. Outside training the
/// averaged branch is always taken.
pub fn fusion_branch(p_net: f64, u: f64, training: bool) -> Result<Branch> {
    if !(0.0..=1.0).contains(&p_net) {
        return Err(Error::config(format!("p_net {p_net} outside [0, 1]")));
    }
    if !training {
        return Ok(Branch::Mean);
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::contract(format!("uniform variate {u} outside [0, 1]")));
    }
    Ok(if u < p_net / 2.0 {
        Branch::Text
    } else if u > 1.0 - p_net / 2.0 {
        Branch::Image
    } else {
        Branch::Mean
    })
}

/// Modality dropout: returns `t`, `i` or their average, and the branch used.
pub fn modality_dropout_fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    t: Var,
    i: Var,
    p_net: f64,
    u: f64,
    training: bool,
) -> Result<(Var, Branch)> {
    if g.shape(t) != g.shape(i) {
        return Err(Error::Shape {
            op: "modality_dropout_fuse",
            lhs: g.shape(t).to_vec(),
            rhs: g.shape(i).to_vec(),
        });
    }
    let branch = fusion_branch(p_net, u, training)?;
    let m = match branch {
        Branch::Text => t,
        Branch::Image => i,
        Branch::Mean => {
            let s = g.add(t, i)?;
            g.scale(s, T::cst(0.5))?
        }
    };
    Ok((m, branch))
}

/// Fusion mode for one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    /// Always average the two streams.
    Inference,
    /// Modality dropout with one uniform draw per layer.
    Training { p_net: f64, draws: Vec<f64> },
}

impl Fusion {
    /// Draws one uniform variate per layer.
    pub fn sample<R: Rng + ?Sized>(p_net: f64, n_layers: usize, rng: &mut R) -> Self {
        Fusion::Training {
            p_net,
            draws: (0..n_layers).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn layer(&self, l: usize) -> Result<(f64, f64, bool)> {
        match self {
            Fusion::Inference => Ok((0.0, 0.5, false)),
            Fusion::Training { p_net, draws } => draws
                .get(l)
                .map(|&u| (*p_net, u, true))
                .ok_or_else(|| Error::contract(format!("no dropout draw for layer {l}"))),
        }
    }
}

/// Weights of one encoder layer: the two stream blocks and the history
/// updater.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub text_attn: MultiHeadAttention,
    pub text_norm: LayerNorm,
    pub image_attn: MultiHeadAttention,
    pub image_norm: LayerNorm,
    pub history_attn: MultiHeadAttention,
    pub history_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c: &ModelConfig,
    ) -> Result<Self> {
        let (d, h, eps) = (c.d_model, c.n_heads, c.ln_eps);
        Ok(EncoderLayer {
            text_attn: MultiHeadAttention::new(store, rng, &format!("{name}.text_attn"), d, h)?,
            text_norm: LayerNorm::new(store, &format!("{name}.text_norm"), d, eps)?,
            image_attn: MultiHeadAttention::new(store, rng, &format!("{name}.image_attn"), d, h)?,
            image_norm: LayerNorm::new(store, &format!("{name}.image_norm"), d, eps)?,
            history_attn: MultiHeadAttention::new(store, rng, &format!("{name}.history_attn"), d, h)?,
            history_norm: LayerNorm::new(store, &format!("{name}.history_norm"), d, eps)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, c.d_ff)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, eps)?,
        })
    }
}

/// Layer-0 inputs of one utterance.
#[derive(Clone, Debug)]
pub struct EmbeddedUtterance {
    /// `m × d`: scaled token embeddings plus positions.
    pub text: Var,
    /// `n × d` projected image features, `None` when the utterance has no
    /// real image.
    pub images: Option<Var>,
    pub text_mask: Vec<bool>,
    pub image_mask: Vec<bool>,
    /// True when the text was empty and replaced by the image-context token.
    pub image_only: bool,
}

/// Stream values of one encoder layer for one utterance.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub text: Var,
    pub image: Var,
    pub fused: Var,
    pub history: Var,
    pub branch: Branch,
}

#[derive(Clone, Debug)]
pub struct UtteranceTrace {
    /// History entering layer 0 of this utterance.
    pub history_in: Var,
    pub history_in_mask: Vec<bool>,
    pub text_mask: Vec<bool>,
    /// The image stream fell back to the text stream (no images).
    pub image_fallback: bool,
    pub layers: Vec<LayerTrace>,
}

/// Result of encoding a context: the decoder memory plus the full trace.
#[derive(Clone, Debug)]
pub struct ContextEncoding {
    /// Final-layer history of the query, `m_q × d`.
    pub memory: Var,
    pub memory_mask: Vec<bool>,
    pub utterances: Vec<UtteranceTrace>,
}

impl ContextEncoding {
    /// Branch taken at each layer of each utterance.
    pub fn branches(&self) -> impl Iterator<Item = Branch> + '_ {
        self.utterances.iter().flat_map(|u| u.layers.iter().map(|l| l.branch))
    }
}

fn mask_for(lq: usize, key_valid: &[bool]) -> Option<Vec<bool>> {
    if key_valid.iter().all(|&v| v) {
        None
    } else {
        Some(key_mask(lq, key_valid))
    }
}

impl<T: Scalar> Model<T> {
    fn layer(&self, l: usize) -> Result<&EncoderLayer> {
        self.encoder
            .get(l)
            .ok_or_else(|| Error::contract(format!("encoder has no layer {l}")))
    }

    /// Token embeddings (scaled by √d) plus positions, and projected image
    /// features. An utterance without real text is read as the single
    /// image-context token.
    pub fn embed_utterance(&self, g: &mut Graph<'_, T>, u: &UtteranceView<'_>) -> Result<EmbeddedUtterance> {
        let c = &self.config;
        let mut tokens = u.tokens.to_vec();
        let mut text_mask = match u.text_mask {
            Some(m) if m.len() != tokens.len() => {
                return Err(Error::contract("text mask length differs from token count"));
            }
            Some(m) => m.to_vec(),
            None => vec![true; tokens.len()],
        };
        let image_only = !text_mask.iter().any(|&v| v);
        if image_only {
            if tokens.is_empty() {
                tokens.push(IMGCTX);
                text_mask.push(true);
            } else {
                tokens[0] = IMGCTX;
                text_mask[0] = true;
            }
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::data(format!("token id {bad} out of vocabulary of size {}", c.vocab_size)));
        }

        let image_mask = match u.image_mask {
            Some(m) if m.len() != u.images.len() => {
                return Err(Error::contract("image mask length differs from image count"));
            }
            Some(m) => m.to_vec(),
            None => vec![true; u.images.len()],
        };
        let n_real = image_mask.iter().filter(|&&v| v).count();
        if n_real > c.max_images {
            return Err(Error::data(format!("{n_real} images exceed the limit of {}", c.max_images)));
        }
        if let Some(f) = u.images.iter().find(|f| f.len() != c.d_img) {
            return Err(Error::data(format!(
                "image feature of width {} where {} was expected",
                f.len(),
                c.d_img
            )));
        }

        let d = c.d_model;
        let table = g.param(self.embedding);
        let e = g.embedding(table, &tokens, T::cst((d as f64).sqrt()))?;
        let pe = g.leaf(positional_encoding(tokens.len(), d))?;
        let text = g.add(e, pe)?;
        let images = if n_real > 0 {
            let x = g.leaf(Tensor::from_rows(u.images)?)?;
            Some(self.image_proj.forward(g, x)?)
        } else {
            None
        };
        Ok(EmbeddedUtterance {
            text,
            images,
            text_mask,
            image_mask,
            image_only,
        })
    }

    /// `T_l = LN(MHA(T, T, T)) + T` with padded words masked as keys.
    pub fn text_stream_layer(&self, g: &mut Graph<'_, T>, l: usize, t_prev: Var, text_mask: &[bool]) -> Result<Var> {
        let layer = self.layer(l)?;
        let mask = mask_for(g.shape(t_prev)[0], text_mask);
        let a = layer.text_attn.forward(g, t_prev, t_prev, t_prev, mask.as_deref())?;
        let n = layer.text_norm.forward(g, a)?;
        g.add(n, t_prev)
    }

    /// `I_l = LN(MHA(T, I, I)) + T`: words query the image rows, so the
    /// result is word-aligned.
    pub fn image_stream_layer(
        &self,
        g: &mut Graph<'_, T>,
        l: usize,
        t_prev: Var,
        i_prev: Var,
        image_mask: &[bool],
    ) -> Result<Var> {
        let layer = self.layer(l)?;
        let mask = mask_for(g.shape(t_prev)[0], image_mask);
        let a = layer.image_attn.forward(g, t_prev, i_prev, i_prev, mask.as_deref())?;
        let n = layer.image_norm.forward(g, a)?;
        g.add(n, t_prev)
    }

    /// `H̃ = MHA(M, H, H)`, `Ĥ = LN(H̃) + M`, `H_l = LN(FFN(Ĥ)) + Ĥ`.
    pub fn history_update(
        &self,
        g: &mut Graph<'_, T>,
        l: usize,
        m: Var,
        h_prev: Var,
        history_mask: &[bool],
    ) -> Result<Var> {
        let layer = self.layer(l)?;
        let mask = mask_for(g.shape(m)[0], history_mask);
        let a = layer.history_attn.forward(g, m, h_prev, h_prev, mask.as_deref())?;
        let n = layer.history_norm.forward(g, a)?;
        let h_hat = g.add(n, m)?;
        let f = layer.ffn.forward(g, h_hat)?;
        let f = layer.ffn_norm.forward(g, f)?;
        g.add(f, h_hat)
    }

    /// Encodes context utterances then the query, oldest first. The first
    /// utterance starts from the history parameter; each later one starts
    /// from the previous utterance's final-layer history. Only the most
    /// recent `context_size` turns before the query are kept.
    pub fn encode_context(
        &self,
        g: &mut Graph<'_, T>,
        utterances: &[UtteranceView<'_>],
        fusion: &Fusion,
    ) -> Result<ContextEncoding> {
        if utterances.is_empty() {
            return Err(Error::contract("encode_context needs at least the query"));
        }
        let keep = self.config.context_size + 1;
        let utterances = if utterances.len() > keep {
            log::debug!("keeping the last {keep} of {} utterances", utterances.len());
            &utterances[utterances.len() - keep..]
        } else {
            utterances
        };

        let mut h = g.param(self.history);
        let mut h_mask = vec![true; self.config.h_len];
        let mut traces = Vec::with_capacity(utterances.len());
        for u in utterances {
            let emb = self.embed_utterance(g, u)?;
            let fallback = emb.images.is_none();
            if fallback {
                log::debug!("utterance without images: image stream falls back to the text stream");
            }
            let mut trace = UtteranceTrace {
                history_in: h,
                history_in_mask: h_mask.clone(),
                text_mask: emb.text_mask.clone(),
                image_fallback: fallback,
                layers: Vec::with_capacity(self.encoder.len()),
            };
            let mut t = emb.text;
            let mut i = emb.images;
            for l in 0..self.encoder.len() {
                let t_new = self.text_stream_layer(g, l, t, &emb.text_mask)?;
                let i_new = match i {
                    // Image rows at layer 0, word-aligned rows afterwards.
                    Some(iv) => {
                        let keys = if l == 0 { &emb.image_mask } else { &emb.text_mask };
                        self.image_stream_layer(g, l, t, iv, keys)?
                    }
                    None => t_new,
                };
                let (p, u, training) = fusion.layer(l)?;
                let (m, branch) = modality_dropout_fuse(g, t_new, i_new, p, u, training)?;
                h = self.history_update(g, l, m, h, &h_mask)?;
                // From here on the history is aligned with this utterance's words.
                h_mask.clone_from(&emb.text_mask);
                trace.layers.push(LayerTrace {
                    text: t_new,
                    image: i_new,
                    fused: m,
                    history: h,
                    branch,
                });
                t = t_new;
                if !fallback {
                    i = Some(i_new);
                }
            }
            traces.push(trace);
        }
        Ok(ContextEncoding {
            memory: h,
            memory_mask: h_mask,
            utterances: traces,
        })
    }
}
