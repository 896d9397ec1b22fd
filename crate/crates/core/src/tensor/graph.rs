use super::{gemm, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: T,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    Custom {
        x: Var,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose data stays in the borrowed store.
    value: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of tensor operations (a Wengert list).
///
/// Every node's inputs precede it, so walking the node list backwards is a
/// valid reverse topological order. A graph lives on a single thread; many
/// graphs may borrow one [`ParamStore`] concurrently.
pub struct Graph<'p, T: Scalar = f64> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    signature: u64,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            signature: FNV_OFFSET,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two forward
    /// passes with equal signatures took the same piecewise-linear branch.
    pub fn activation_signature(&self) -> u64 {
        self.signature
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(data), _) => data,
            (None, Op::Param(i)) => self
                .params
                .expect("parameter node without a store")
                .tensor_at(*i)
                .data(),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push("leaf", shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(t)
    }

    /// Records a parameter leaf. Repeated calls for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let i = id.index();
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let t = self.params.expect("graph has no parameter store").tensor_at(i);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: None,
            op: Op::Param(i),
            requires_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[i] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.value(v).len() / cols };
        (rows, cols)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`, without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        let bref = if trans_b {
            MatRef::dense(self.value(b), br, bc).t()
        } else {
            MatRef::dense(self.value(b), br, bc)
        };
        gemm(T::one(), MatRef::dense(self.value(a), m, k), bref, T::zero(), MatMut::dense(&mut out, m, n));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        self.push("transpose", vec![n, m], out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    /// Adds a length-`c` vector to every row of `x: …×c`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.shape(bias) != [c] {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        self.push("add_row", self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.requires_grad(x);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut sig = self.signature;
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let on = v > T::zero();
                sig = (sig ^ u64::from(on)).wrapping_mul(FNV_PRIME);
                if on {
                    v
                } else {
                    T::zero()
                }
            })
            .collect();
        self.signature = sig;
        let rg = self.requires_grad(x);
        self.push("relu", self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis. Entries where `mask` is false get
    /// probability zero; `mask` has one flag per element of `x`.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::contract(format!(
                    "softmax mask has {} entries for a {rows}×{cols} input",
                    m.len()
                )));
            }
        }
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            let row_mask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
            if !softmax_row(&mut out[r * cols..(r + 1) * cols], row_mask) {
                return Err(Error::contract(format!("softmax row {r} is fully masked")));
            }
        }
        let rg = self.requires_grad(x);
        self.push("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if d == 0 {
            return Err(Error::contract("layer_norm over an empty axis"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let eps = T::cst(eps);
        let dt = T::cst(d as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", self.shape(x).to_vec(), out, op, rg)
    }

    /// Gathers rows of `table: V×d` and multiplies them by `scale`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], scale: T) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::data(format!("token id {bad} out of vocabulary of size {vocab}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend(t[i * d..(i + 1) * d].iter().map(|&v| v * scale));
        }
        let rg = self.requires_grad(table);
        let shape = vec![ids.len(), d];
        self.push("embedding", shape, out, Op::Embedding { table, ids, scale }, rg)
    }

    /// Stacks 2-D inputs with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push("concat_rows", vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push("sum", vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = self.value(x).iter().copied().sum::<T>() / T::cst(n as f64);
        let rg = self.requires_grad(x);
        self.push("mean", vec![], vec![s], Op::Mean(x), rg)
    }

    /// Summed negative log-likelihood of `targets` under row-wise
    /// log-softmax of `logits: L×V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::data(format!("target id {bad} out of vocabulary of size {vocab}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut nll = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            nll = nll + lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.requires_grad(logits);
        let op = Op::CrossEntropy { logits, targets, probs };
        self.push("cross_entropy", vec![], vec![nll], op, rg)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q: Lq×d`, `k: Lk×d`, `v: Lk×d`. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`; the result is the concatenation of the
    /// per-head outputs. `mask` is `Lq×Lk`, true where attention is allowed.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (lq, d) = self.dims2(q, "attention")?;
        let (lk, dk) = self.dims2(k, "attention")?;
        let (lv, dv) = self.dims2(v, "attention")?;
        if dk != d {
            return Err(self.shape_err("attention", q, k));
        }
        if dv != d || lv != lk {
            return Err(self.shape_err("attention", k, v));
        }
        if lk == 0 {
            return Err(Error::EmptyKeys);
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide width {d}")));
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(Error::contract(format!(
                    "attention mask has {} entries, expected {lq}×{lk}",
                    m.len()
                )));
            }
        }
        let hd = d / heads;
        let scale = T::cst(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            gemm(
                scale,
                MatRef::new(qv, h * hd, lq, hd, d, 1),
                MatRef::new(kv, h * hd, lk, hd, d, 1).t(),
                T::zero(),
                MatMut::dense(p, lq, lk),
            );
            for i in 0..lq {
                let row_mask = mask.map(|m| &m[i * lk..(i + 1) * lk]);
                if !softmax_row(&mut p[i * lk..(i + 1) * lk], row_mask) {
                    return Err(Error::contract(format!("attention query row {i} has no admissible key")));
                }
            }
            gemm(
                T::one(),
                MatRef::dense(p, lq, lk),
                MatRef::new(vv, h * hd, lk, hd, d, 1),
                T::zero(),
                MatMut::new(&mut out, h * hd, lq, hd, d, 1),
            );
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        };
        self.push("attention", vec![lq, d], out, op, rg)
    }

    /// Elementwise op with a caller-supplied backward rule
    /// `(input, output, output_grad) -> input_grad`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&[T]) -> Vec<T>,
        backward: impl Fn(&[T], &[T], &[T]) -> Vec<T> + 'static,
    ) -> Result<Var> {
        let out = forward(self.value(x));
        if out.len() != self.value(x).len() {
            return Err(Error::contract("custom op changed the element count"));
        }
        let rg = self.requires_grad(x);
        let op = Op::Custom {
            x,
            backward: Box::new(backward),
        };
        self.push("custom", self.shape(x).to_vec(), out, op, rg)
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order; the returned gradients are independent of the graph.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let param_nodes = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (p, v.0)))
            .collect();
        Ok(Gradients {
            grads,
            param_nodes,
            n_params: self.param_vars.len(),
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
        if let Some(g) = self.grad_buf(grads, v) {
            g.iter_mut().zip(delta).for_each(|(a, &b)| *a = *a + b);
        }
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.as_deref().unwrap_or(&[]);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
                let n = if trans_b { br } else { bc };
                let gmat = MatRef::dense(gy, m, n);
                let bmat = MatRef::dense(self.value(b), br, bc);
                let amat = MatRef::dense(self.value(a), m, k);
                if let Some(ga) = self.grad_buf(grads, a) {
                    let bt = if trans_b { bmat } else { bmat.t() };
                    gemm(T::one(), gmat, bt, T::one(), MatMut::dense(ga, m, k));
                }
                if let Some(gb) = self.grad_buf(grads, b) {
                    if trans_b {
                        gemm(T::one(), gmat.t(), amat, T::one(), MatMut::dense(gb, br, bc));
                    } else {
                        gemm(T::one(), amat.t(), gmat, T::one(), MatMut::dense(gb, br, bc));
                    }
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(ga) = self.grad_buf(grads, a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = ga[r * n + c] + gy[c * m + r];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, gy);
                self.acc(grads, b, gy);
            }
            &Op::AddRow(x, bias) => {
                self.acc(grads, x, gy);
                let c = self.shape(bias)[0];
                if let Some(gb) = self.grad_buf(grads, bias) {
                    for row in gy.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let da: Vec<T> = gy.iter().zip(self.value(b)).map(|(&g, &v)| g * v).collect();
                let db: Vec<T> = gy.iter().zip(self.value(a)).map(|(&g, &v)| g * v).collect();
                self.acc(grads, a, &da);
                self.acc(grads, b, &db);
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    gx.iter_mut().zip(gy).for_each(|(a, &g)| *a = *a + g * s);
                }
            }
            &Op::Relu(x) => {
                let xs = self.value(x);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((a, &g), &v) in gx.iter_mut().zip(gy).zip(xs) {
                        if v > T::zero() {
                            *a = *a + g;
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let cols = node.shape.last().copied().unwrap_or(1).max(1);
                if let Some(gx) = self.grad_buf(grads, x) {
                    for ((yr, gr), out) in y.chunks(cols).zip(gy.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum::<T>();
                        for ((o, &p), &g) in out.iter_mut().zip(yr).zip(gr) {
                            *o = *o + p * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let dt = T::cst(d as f64);
                let g = self.value(*gain);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for r in 0..inv_std.len() {
                        let gyr = &gy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gyr[j] * g[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        let k = inv_std[r] / dt;
                        for j in 0..d {
                            let dh = gyr[j] * g[j];
                            let v = &mut gx[r * d + j];
                            *v = *v + k * (dt * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.grad_buf(grads, *gain) {
                    for (gyr, hr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gyr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *bias) {
                    for gyr in gy.chunks(d) {
                        gb.iter_mut().zip(gyr).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
            Op::Embedding { table, ids, scale } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + gy[r * d + j] * *scale;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, &gy[offset..offset + n]);
                    offset += n;
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, x) {
                    gx.iter_mut().for_each(|a| *a = *a + gy[0]);
                }
            }
            &Op::Mean(x) => {
                let n = T::cst(self.value(x).len() as f64);
                if let Some(gx) = self.grad_buf(grads, x) {
                    gx.iter_mut().for_each(|a| *a = *a + gy[0] / n);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.shape(*logits)[1];
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (a, &p) in gl.iter_mut().zip(probs) {
                        *a = *a + gy[0] * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * vocab + t] = gl[r * vocab + t] - gy[0];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.attention_backward(gy, grads, (*q, *k, *v), *heads, *scale, probs),
            Op::Custom { x, backward } => {
                let delta = backward(self.value(*x), y, gy);
                self.acc(grads, *x, &delta);
            }
        }
    }

    fn attention_backward(
        &self,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        scale: T,
        probs: &[T],
    ) {
        let (lq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let lk = self.shape(k)[0];
        let hd = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (need_q, need_k, need_v) = (self.requires_grad(q), self.requires_grad(k), self.requires_grad(v));
        let mut dq = vec![T::zero(); if need_q { lq * d } else { 0 }];
        let mut dk = vec![T::zero(); if need_k { lk * d } else { 0 }];
        let mut dv = vec![T::zero(); if need_v { lk * d } else { 0 }];
        let mut dp = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            let go = MatRef::new(gy, h * hd, lq, hd, d, 1);
            if need_v {
                gemm(
                    T::one(),
                    MatRef::dense(p, lq, lk).t(),
                    go,
                    T::one(),
                    MatMut::new(&mut dv, h * hd, lk, hd, d, 1),
                );
            }
            if !(need_q || need_k) {
                continue;
            }
            gemm(
                T::one(),
                go,
                MatRef::new(vv, h * hd, lk, hd, d, 1).t(),
                T::zero(),
                MatMut::dense(&mut dp, lq, lk),
            );
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut dp[i * lk..(i + 1) * lk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            if need_q {
                gemm(
                    T::one(),
                    MatRef::dense(&dp, lq, lk),
                    MatRef::new(kv, h * hd, lk, hd, d, 1),
                    T::one(),
                    MatMut::new(&mut dq, h * hd, lq, hd, d, 1),
                );
            }
            if need_k {
                gemm(
                    T::one(),
                    MatRef::dense(&dp, lq, lk).t(),
                    MatRef::new(qv, h * hd, lq, hd, d, 1),
                    T::one(),
                    MatMut::new(&mut dk, h * hd, lk, hd, d, 1),
                );
            }
        }
        if need_q {
            self.acc(grads, q, &dq);
        }
        if need_k {
            self.acc(grads, k, &dk);
        }
        if need_v {
            self.acc(grads, v, &dv);
        }
    }
}

/// In-place masked softmax of one row. Returns false if every entry is masked.
fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> bool {
    let admit = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if admit(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut total = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if admit(j) {
            *v = (*v - max).exp();
            total = total + *v;
        } else {
            *v = T::zero();
        }
    }
    row.iter_mut().for_each(|v| *v = *v / total);
    true
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<(usize, usize)>,
    n_params: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` requires gradients
    /// and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_nodes
            .iter()
            .find(|(p, _)| *p == id.index())
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let mut out = ParamGrads::empty(self.n_params);
        for &(p, node) in &self.param_nodes {
            if let Some(g) = self.grads[node].take() {
                out.set(p, g);
            }
        }
        out
    }
}
