//! Naive nested-loop re-implementation of the model, used as an oracle.
//! Reads weights by name and shares no code with the library forward pass.

use mmdial::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.shape()[t.shape().len() - 1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn from_flat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Scaled dot-product attention for one head; `allowed(i, j)` gates keys.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| allowed(i, j).then(|| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale))
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
            let z: f64 = w.iter().sum();
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn columns(m: &Mat, from: usize, to: usize) -> Mat {
    m.iter().map(|r| r[from..to].to_vec()).collect()
}

/// Multi-head attention with explicit head splitting.
pub fn mha(
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wo: &Mat,
    heads: usize,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let (qp, kp, vp) = (matmul(q, wq), matmul(k, wk), matmul(v, wv));
    let d = qp[0].len();
    let hd = d / heads;
    let mut concat = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let out = attend(&columns(&qp, a, b), &columns(&kp, a, b), &columns(&vp, a, b), allowed);
        for (row, o) in concat.iter_mut().zip(out) {
            row.extend(o);
        }
    }
    matmul(&concat, wo)
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = (0..b1.len())
                .map(|j| (b1[j] + row.iter().enumerate().map(|(i, &x)| x * w1[i][j]).sum::<f64>()).max(0.0))
                .collect();
            (0..b2.len())
                .map(|j| b2[j] + hidden.iter().enumerate().map(|(i, &h)| h * w2[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn sinusoid(len: usize, d: usize) -> Mat {
    (0..len)
        .map(|pos| {
            (0..d)
                .map(|j| {
                    let i = (j / 2) as f64;
                    let w = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                    if j % 2 == 0 {
                        w.sin()
                    } else {
                        w.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Oracle fusion choice per layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pick {
    Text,
    Image,
    Mean,
}

/// One utterance as the oracle sees it: real tokens and real images only.
pub struct OUtt {
    pub tokens: Vec<u32>,
    pub images: Mat,
}

pub struct Oracle<'a> {
    pub p: &'a ParamStore<f64>,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub eps: f64,
    pub tied: bool,
}

pub struct OracleTrace {
    /// History entering each utterance.
    pub history_in: Vec<Mat>,
    pub memory: Mat,
}

impl<'a> Oracle<'a> {
    pub fn m(&self, name: &str) -> Mat {
        to_mat(self.p.get(self.p.id(name).unwrap_or_else(|| panic!("no parameter {name}"))))
    }

    pub fn v(&self, name: &str) -> Vec<f64> {
        self.p.get(self.p.id(name).unwrap()).data().to_vec()
    }

    pub fn mha_named(&self, name: &str, q: &Mat, k: &Mat, v: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
        mha(
            &self.m(&format!("{name}.wq")),
            &self.m(&format!("{name}.wk")),
            &self.m(&format!("{name}.wv")),
            &self.m(&format!("{name}.wo")),
            self.heads,
            q,
            k,
            v,
            allowed,
        )
    }

    pub fn ln_named(&self, name: &str, x: &Mat) -> Mat {
        layer_norm(x, &self.v(&format!("{name}.gain")), &self.v(&format!("{name}.bias")), self.eps)
    }

    pub fn ffn_named(&self, name: &str, x: &Mat) -> Mat {
        ffn(
            x,
            &self.m(&format!("{name}.inner.weight")),
            &self.v(&format!("{name}.inner.bias")),
            &self.m(&format!("{name}.outer.weight")),
            &self.v(&format!("{name}.outer.bias")),
        )
    }

    pub fn embed(&self, tokens: &[u32]) -> Mat {
        let e = self.m("embedding");
        let s = (self.d as f64).sqrt();
        let pe = sinusoid(tokens.len(), self.d);
        tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| (0..self.d).map(|j| e[t as usize][j] * s + pe[i][j]).collect())
            .collect()
    }

    pub fn project_images(&self, images: &Mat) -> Mat {
        let w = self.m("image_proj.weight");
        let b = self.v("image_proj.bias");
        matmul(images, &w)
            .into_iter()
            .map(|r| r.iter().zip(&b).map(|(x, y)| x + y).collect())
            .collect()
    }

    /// Runs the encoder over utterances oldest-first. `picks[l]` selects the
    /// fusion branch of layer `l`.
    pub fn encode(&self, utts: &[OUtt], picks: &[Pick]) -> OracleTrace {
        let all = |_: usize, _: usize| true;
        let mut h = self.m("history");
        let mut history_in = Vec::new();
        for u in utts {
            history_in.push(h.clone());
            let mut t = self.embed(&u.tokens);
            let mut i = (!u.images.is_empty()).then(|| self.project_images(&u.images));
            for l in 0..self.layers {
                let p = format!("encoder.{l}");
                let ta = self.mha_named(&format!("{p}.text_attn"), &t, &t, &t, &all);
                let t_new = add(&self.ln_named(&format!("{p}.text_norm"), &ta), &t);
                let i_new = match &i {
                    Some(iv) => {
                        let ia = self.mha_named(&format!("{p}.image_attn"), &t, iv, iv, &all);
                        add(&self.ln_named(&format!("{p}.image_norm"), &ia), &t)
                    }
                    None => t_new.clone(),
                };
                let m = match picks[l] {
                    Pick::Text => t_new.clone(),
                    Pick::Image => i_new.clone(),
                    Pick::Mean => add(&t_new, &i_new).iter().map(|r| r.iter().map(|x| x * 0.5).collect()).collect(),
                };
                let ha = self.mha_named(&format!("{p}.history_attn"), &m, &h, &h, &all);
                let h_hat = add(&self.ln_named(&format!("{p}.history_norm"), &ha), &m);
                let f = self.ffn_named(&format!("{p}.ffn"), &h_hat);
                h = add(&self.ln_named(&format!("{p}.ffn_norm"), &f), &h_hat);
                t = t_new;
                if i.is_some() {
                    i = Some(i_new);
                }
            }
        }
        OracleTrace { history_in, memory: h }
    }

    pub fn decode_logits(&self, prefix: &[u32], memory: &Mat) -> Mat {
        let causal = |i: usize, j: usize| j <= i;
        let all = |_: usize, _: usize| true;
        let mut x = self.embed(prefix);
        for l in 0..self.layers {
            let p = format!("decoder.{l}");
            let a = self.mha_named(&format!("{p}.self_attn"), &x, &x, &x, &causal);
            x = self.ln_named(&format!("{p}.self_norm"), &add(&x, &a));
            let a = self.mha_named(&format!("{p}.cross_attn"), &x, memory, memory, &all);
            x = self.ln_named(&format!("{p}.cross_norm"), &add(&x, &a));
            let f = self.ffn_named(&format!("{p}.ffn"), &x);
            x = self.ln_named(&format!("{p}.ffn_norm"), &add(&x, &f));
        }
        if self.tied {
            let e = self.m("embedding");
            x.iter()
                .map(|r| e.iter().map(|er| r.iter().zip(er).map(|(a, b)| a * b).sum()).collect())
                .collect()
        } else {
            matmul(&x, &self.m("output"))
        }
    }
}
