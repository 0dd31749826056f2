use rand::Rng;
use rayon::prelude::*;

use super::{gemm, softmax_rows_in_place, MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance in [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values, the
/// output value and the upstream gradient, and returns one gradient buffer
/// per input.
pub type CustomBackward<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddRowBias { x: Var, bias: Var, cols: usize },
    Gelu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, mean: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
    NarrowCols { x: Var, cols: usize, start: usize, width: usize },
    GatherRows { x: Var, rows: Vec<usize>, cols: usize },
    Pick { x: Var, index: usize },
    Reshape { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    EmbedTokens { patches: Var, cls: Var, pos: Var, batch: usize, n_patches: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so [`Tape::backward`] can replay it in
/// reverse.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and reverse index order is a valid topological order. Gradients of
/// every node that requires one (leaves and intermediates) are retained
/// after `backward`.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor { shape: self.nodes[v.0].value.shape.clone(), data: g.clone() })
    }

    /// Attention probabilities saved by [`Tape::attention`], laid out as
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn val(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    // ---- forward ops -------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::dense(self.val(a), m, k),
            MatRef::dense(self.val(b), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.val(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Scale { x, factor }, &[x])
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix_dims();
        if self.value(bias).numel() != cols {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.val(bias);
        let data = self.val(x).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddRowBias { x, bias, cols }, &[x, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.val(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Gelu { x }, &[x])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.val(x);
        let mut out = src.to_vec();
        if inner == 1 {
            softmax_rows_in_place(&mut out, len);
        } else {
            let mut line = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = src[(o * len + j) * inner + i];
                    }
                    softmax_rows_in_place(&mut line, len);
                    for (j, &v) in line.iter().enumerate() {
                        out[(o * len + j) * inner + i] = v;
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis with eps = [`LAYER_NORM_EPS`].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_n = T::one() / T::lit(cols as f64);
        let (g, b) = (self.val(gamma), self.val(beta));
        let mut out = Vec::with_capacity(rows * cols);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.val(x).chunks(cols) {
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mu) * r * g[j] + b[j]));
            mean.push(mu);
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x, gamma, beta, cols, mean, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `[b, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        if b == 0 {
            return Err(Error::Contract("cross_entropy on an empty batch".into()));
        }
        let mut probs = self.val(logits).to_vec();
        softmax_rows_in_place(&mut probs, k);
        let mut total = T::zero();
        for (row, (&label, logit_row)) in labels.iter().zip(self.val(logits).chunks(k)).enumerate() {
            // log-sum-exp form keeps saturated logits exact
            let max = logit_row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = logit_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - logit_row[label]);
            debug_assert!(probs[row * k + label] >= T::zero());
        }
        let loss = total / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Column range `[start, start + width)` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if start + width > cols {
            return Err(Error::Dimension(format!(
                "narrow_cols: range {start}..{} exceeds {cols} columns",
                start + width
            )));
        }
        let data = self.val(x).chunks(cols).flat_map(|row| row[start..start + width].iter().copied()).collect();
        Ok(self.push(
            Tensor { shape: vec![rows, width], data },
            Op::NarrowCols { x, cols, start, width },
            &[x],
        ))
    }

    /// Selects rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n_rows, cols) = self.value(x).as_matrix_dims();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::Index(format!("row {bad} out of range for {n_rows} rows")));
        }
        let src = self.val(x);
        let data = rows.iter().flat_map(|&r| src[r * cols..(r + 1) * cols].iter().copied()).collect();
        Ok(self.push(
            Tensor { shape: vec![rows.len(), cols], data },
            Op::GatherRows { x, rows: rows.to_vec(), cols },
            &[x],
        ))
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(Error::Index(format!("element {index} out of range for {n} elements")));
        }
        let v = self.val(x)[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.val(x).to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Inverted dropout: zeroes elements with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = self.val(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Dropout { x, mask }, &[x])
    }

    /// Builds the token sequence of a ViT: per image, the class token
    /// followed by the patch embeddings, plus positional embeddings.
    ///
    /// `patches` is `[batch * n, dim]`, `cls` is `[1, dim]`, `pos` is
    /// `[n + 1, dim]`; the result is `[batch * (n + 1), dim]`.
    pub fn embed_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (p_rows, dim) = self.value(patches).as_matrix_dims();
        if batch == 0 || p_rows % batch != 0 {
            return Err(Error::Dimension(format!("embed_tokens: {p_rows} patch rows for batch {batch}")));
        }
        let n = p_rows / batch;
        if self.value(cls).numel() != dim || self.value(pos).numel() != (n + 1) * dim {
            return Err(Error::Dimension(format!(
                "embed_tokens: cls {:?} / pos {:?} do not match {n} patches of width {dim}",
                self.shape(cls),
                self.shape(pos)
            )));
        }
        let (pd, cd, posd) = (self.val(patches), self.val(cls), self.val(pos));
        let seq = n + 1;
        let mut out = Vec::with_capacity(batch * seq * dim);
        for b in 0..batch {
            out.extend(cd.iter().zip(&posd[..dim]).map(|(&c, &p)| c + p));
            for i in 0..n {
                let row = &pd[(b * n + i) * dim..(b * n + i + 1) * dim];
                let prow = &posd[(i + 1) * dim..(i + 2) * dim];
                out.extend(row.iter().zip(prow).map(|(&x, &p)| x + p));
            }
        }
        Ok(self.push(
            Tensor { shape: vec![batch * seq, dim], data: out },
            Op::EmbedTokens { patches, cls, pos, batch, n_patches: n },
            &[patches, cls, pos],
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, dim]` with heads occupying
    /// contiguous column blocks of width `dim / heads`. Probabilities are
    /// saved on the tape (see [`Tape::attention_probs`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() || shape.len() != 2 {
            return Err(dim_err("attention", &shape, self.shape(k)));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if batch == 0 || rows % batch != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {rows}x{dim} cannot split into batch {batch} x heads {heads}"
            )));
        }
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.val(q), self.val(k), self.val(v));
        let mut out = vec![T::zero(); rows * dim];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        out.par_chunks_mut(seq * dim)
            .zip(probs.par_chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (out_b, probs_b))| {
                let base = b * seq * dim;
                for h in 0..heads {
                    let at = base + h * dh;
                    let p = &mut probs_b[h * seq * seq..(h + 1) * seq * seq];
                    gemm(scale, head_ref(qd, at, seq, dh, dim), head_ref(kd, at, seq, dh, dim).t(), T::zero(), MatMut::dense(p, seq, seq));
                    softmax_rows_in_place(p, seq);
                    let o = head_mut(out_b, h * dh, seq, dh, dim);
                    gemm(T::one(), MatRef::dense(p, seq, seq), head_ref(vd, at, seq, dh, dim), T::zero(), o);
                }
            });
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Attention { q, k, v, batch, seq, heads, probs },
            &[q, k, v],
        ))
    }

    /// Records a user-defined differentiable op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, backward: CustomBackward<T>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of `loss` for every node that requires one and
    /// is reachable from it. Previous gradients are discarded; fan-out
    /// contributions accumulate by addition.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g_out) = self.grads[idx].take() else { continue };
            self.backward_node(idx, &g_out);
            self.grads[idx] = Some(g_out);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        // Gradient buffer for an input, allocated on first use; None when
        // the input does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
                } else {
                    None
                }
            }};
        }
        let value = |v: Var| -> &[T] { &nodes[v.0].value.data };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (value(a), value(b));
                if let Some(ga) = buf!(a) {
                    gemm(
                        T::one(),
                        MatRef::dense(g, m, n),
                        MatRef::dense(bd, k, n).t(),
                        T::one(),
                        MatMut::dense(ga, m, k),
                    );
                }
                if let Some(gb) = buf!(b) {
                    gemm(
                        T::one(),
                        MatRef::dense(ad, m, k).t(),
                        MatRef::dense(g, m, n),
                        T::one(),
                        MatMut::dense(gb, k, n),
                    );
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = buf!(v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::Mul { a, b } => {
                // a and b may be the same node; each factor contributes.
                let (ad, bd) = (value(a).to_vec(), value(b).to_vec());
                if let Some(ga) = buf!(a) {
                    ga.iter_mut().zip(g.iter().zip(&bd)).for_each(|(d, (&s, &o))| *d = *d + s * o);
                }
                if let Some(gb) = buf!(b) {
                    gb.iter_mut().zip(g.iter().zip(&ad)).for_each(|(d, (&s, &o))| *d = *d + s * o);
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s * factor);
                }
            }
            &Op::AddRowBias { x, bias, cols } => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gb) = buf!(bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::Gelu { x } => {
                let xd = value(x);
                if let Some(gx) = buf!(x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *d = *d + s * gelu_grad(v);
                    }
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value.data;
                if let Some(gx) = buf!(x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..len {
                                gx[at(j)] = gx[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, mean, rstd } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let xd = value(x);
                let gd = value(gamma);
                let inv_n = T::one() / T::lit(cols as f64);
                let xhat = |r: usize, j: usize| (xd[r * cols + j] - mean[r]) * rstd[r];
                if let Some(gg) = buf!(gamma) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        for j in 0..cols {
                            gg[j] = gg[j] + row[j] * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = buf!(beta) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                if let Some(gx) = buf!(x) {
                    for (r, row) in g.chunks(cols).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..cols {
                            let d = row[j] * gd[j];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat(r, j);
                        }
                        let (mean_d, mean_dx) = (sum_d * inv_n, sum_dx * inv_n);
                        for j in 0..cols {
                            let d = row[j] * gd[j];
                            let out = &mut gx[r * cols + j];
                            *out = *out + rstd[r] * (d - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                if let Some(gl) = buf!(logits) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let s = g[0] / T::lit(b as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * k + j] = gl[r * k + j] + s * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::NarrowCols { x, cols, start, width } => {
                if let Some(gx) = buf!(x) {
                    for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(width)) {
                        dst[start..start + width].iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::GatherRows { x, rows, cols } => {
                let (x, cols) = (*x, *cols);
                if let Some(gx) = buf!(x) {
                    for (&r, src) in rows.iter().zip(g.chunks(cols)) {
                        gx[r * cols..(r + 1) * cols].iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            &Op::Pick { x, index } => {
                if let Some(gx) = buf!(x) {
                    gx[index] = gx[index] + g[0];
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = buf!(*x) {
                    for ((d, &s), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *d = *d + s * m;
                    }
                }
            }
            &Op::EmbedTokens { patches, cls, pos, batch, n_patches } => {
                let dim = node.value.shape[1];
                let seq = n_patches + 1;
                if let Some(gp) = buf!(patches) {
                    for b in 0..batch {
                        for i in 0..n_patches {
                            let src = &g[(b * seq + i + 1) * dim..(b * seq + i + 2) * dim];
                            let dst = &mut gp[(b * n_patches + i) * dim..(b * n_patches + i + 1) * dim];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                }
                if let Some(gc) = buf!(cls) {
                    for b in 0..batch {
                        let src = &g[b * seq * dim..(b * seq + 1) * dim];
                        gc.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                if let Some(gpos) = buf!(pos) {
                    for b in 0..batch {
                        let src = &g[b * seq * dim..(b + 1) * seq * dim];
                        gpos.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (q, k, v, batch, seq, heads) = (*q, *k, *v, *batch, *seq, *heads);
                let dim = node.value.shape[1];
                let dh = dim / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (value(q), value(k), value(v));
                let rows = batch * seq;
                let mut dq = vec![T::zero(); rows * dim];
                let mut dk = vec![T::zero(); rows * dim];
                let mut dv = vec![T::zero(); rows * dim];
                dq.par_chunks_mut(seq * dim)
                    .zip(dk.par_chunks_mut(seq * dim))
                    .zip(dv.par_chunks_mut(seq * dim))
                    .enumerate()
                    .for_each(|(b, ((dq_b, dk_b), dv_b))| {
                        let base = b * seq * dim;
                        let mut dp = vec![T::zero(); seq * seq];
                        for h in 0..heads {
                            let at = base + h * dh;
                            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                            let pm = MatRef::dense(p, seq, seq);
                            let g_head = head_ref(g, at, seq, dh, dim);
                            // dV = P^T dO
                            gemm(T::one(), pm.t(), g_head, T::zero(), head_mut(dv_b, h * dh, seq, dh, dim));
                            // dP = dO V^T, then through the row softmax
                            gemm(T::one(), g_head, head_ref(vd, at, seq, dh, dim).t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
                            for (dp_row, p_row) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                                let dot = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum::<T>();
                                for (d, &pv) in dp_row.iter_mut().zip(p_row) {
                                    *d = pv * (*d - dot);
                                }
                            }
                            let ds = MatRef::dense(&dp, seq, seq);
                            gemm(scale, ds, head_ref(kd, at, seq, dh, dim), T::zero(), head_mut(dq_b, h * dh, seq, dh, dim));
                            gemm(scale, ds.t(), head_ref(qd, at, seq, dh, dim), T::zero(), head_mut(dk_b, h * dh, seq, dh, dim));
                        }
                    });
                for (var, contrib) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(gv) = buf!(var) {
                        gv.iter_mut().zip(&contrib).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let input_values: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let contribs = backward(&input_values, &node.value, g);
                for (&var, contrib) in inputs.iter().zip(contribs) {
                    if let Some(gv) = buf!(var) {
                        assert_eq!(gv.len(), contrib.len(), "custom backward returned a mis-sized gradient");
                        gv.iter_mut().zip(&contrib).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
        }
    }
}

/// One head's `[seq, dh]` column block inside a `[rows, dim]` matrix.
fn head_ref<T>(data: &[T], offset: usize, seq: usize, dh: usize, dim: usize) -> MatRef<'_, T> {
    MatRef { data, offset, rows: seq, cols: dh, rs: dim, cs: 1 }
}

fn head_mut<T>(data: &mut [T], offset: usize, seq: usize, dh: usize, dim: usize) -> MatMut<'_, T> {
    MatMut { data, offset, rows: seq, cols: dh, rs: dim, cs: 1 }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEF) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_SCALE) * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::<f32>::new();
        let i2 = tape.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t32(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t32(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.7).sin()));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| d[(o * 3 + j) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2]));

        let c = tape.constant(Tensor::new(vec![1, 2], vec![7.0, 7.0]).unwrap());
        let y = tape.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        // [1, -1] has unit variance: output = x / sqrt(1 + eps)
        let r = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(r, ones, zeros).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] + expect).abs() < 1e-12);

        let g0 = tape.constant(Tensor::zeros(&[2]));
        let b5 = tape.constant(Tensor::full(&[2], 5.0));
        let y = tape.layer_norm(r, g0, b5).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let want = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715f64).tanh());
        assert!((gelu_scalar(1.0f64) - want).abs() < 1e-15);
        assert!((gelu_scalar(1.0f64) - 0.84119).abs() < 1e-5);
        assert!(gelu_scalar(-10.0f32).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-12);

        let sat = tape.constant(Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(sat, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-6);

        assert!(matches!(tape.cross_entropy(z, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_fn(&[4], |i| i as f32 - 1.0), true);
        let x = tape.constant(t32(&[4], &[0.5, -2.0, 3.0, 7.0]));
        let wx = tape.mul(w, x).unwrap();
        let s = tape.sum(wx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.5, -2.0, 3.0, 7.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::zeros(&[3]), true);
        let a = tape.sum(w);
        let b = tape.sum(w);
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn unreachable_leaf_untouched_and_non_scalar_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::zeros(&[3]), true);
        let u = tape.leaf(Tensor::zeros(&[3]), true);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(tape.grad(u).is_none());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[2 * 5, 8], |i| (i as f64 * 0.37).sin()));
        let k = tape.constant(Tensor::from_fn(&[2 * 5, 8], |i| (i as f64 * 0.11).cos()));
        let v = tape.constant(Tensor::from_fn(&[2 * 5, 8], |i| i as f64 * 0.01));
        let o = tape.attention(q, k, v, 2, 2).unwrap();
        assert_eq!(tape.value(o).shape(), &[10, 8]);
        for row in tape.attention_probs(o).unwrap().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
