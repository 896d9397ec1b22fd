//! Reusable blocks: linear maps, layer normalisation, multi-head attention,
//! the position-wise feed-forward network and sinusoidal positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// `x · W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, fan_in, fan_out))?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], T::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, bias, eps })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Bias-free multi-head attention with `d_model × d_model` projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!("d_model {d_model} not divisible by {n_heads} heads")));
        }
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), xavier_uniform(rng, d_model, d_model));
        Ok(MultiHeadAttention {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            n_heads,
            d_model,
        })
    }

    /// Attends `q: Lq×d` over `k, v: Lk×d`. `mask` is `Lq×Lk`, true where
    /// a query may look at a key.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        for x in [q, k, v] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != self.d_model {
                return Err(Error::Shape {
                    op: "multi_head_attention",
                    lhs: g.shape(x).to_vec(),
                    rhs: vec![self.d_model],
                });
            }
        }
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: g.shape(k).to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
        if g.shape(k)[0] == 0 {
            return Err(Error::EmptyKeys);
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let heads = g.attention(qp, kp, vp, self.n_heads, mask)?;
        g.matmul(heads, wo)
    }
}

/// `W2 · relu(W1 · x + b1) + b2`, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::config("d_ff must be positive"));
        }
        Ok(FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d_model, d_ff, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d_model, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Fixed sinusoidal table: `sin(pos / 10000^(2i/d))` in even columns and
/// the matching cosine in odd columns.
pub fn positional_encoding<T: Scalar>(length: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(length * d_model);
    for pos in 0..length {
        for j in 0..d_model {
            let pair = (j / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
            data.push(T::cst(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![length, d_model], data).expect("shape matches")
}

/// `lq × lk` mask admitting every valid key for every query.
pub fn key_mask(lq: usize, key_valid: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(lq * key_valid.len());
    for _ in 0..lq {
        m.extend_from_slice(key_valid);
    }
    m
}

/// Lower-triangular (diagonal included) `l × l` mask.
pub fn causal_mask(l: usize) -> Vec<bool> {
    (0..l * l).map(|i| i % l <= i / l).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_row_and_range() {
        let pe: Tensor<f64> = positional_encoding(5, 8);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn positional_encoding_matches_scalar_formula() {
        let pe: Tensor<f64> = positional_encoding(5, 8);
        for pos in 0..5 {
            for i in 0..4 {
                let w = (pos as f64) / 10000f64.powf(2.0 * i as f64 / 8.0);
                assert!((pe.row(pos)[2 * i] - w.sin()).abs() < 1e-15);
                assert!((pe.row(pos)[2 * i + 1] - w.cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::rng();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "a", 6, 4).is_err());
    }
}
