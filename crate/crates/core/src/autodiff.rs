//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles while the
//! forward pass runs; [`Graph::backward`] then walks the tape once in reverse.
//! Operations are coarse (fused attention, 1-D convolution, layer norm,
//! softmax cross-entropy) so a full model forward stays in the low hundreds of
//! nodes. Parameters enter as borrowed leaves and are never copied.

use std::borrow::Cow;
use std::rc::Rc;

use crate::scalar::{c, Scalar};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    NormalizeRows(Var),
    MulCol(Var, Var),
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    ScatterAddRows {
        x: Var,
        rows: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    PairNormalize(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Allowed-attention pattern; `allowed[i * S + j]` lets query `i` see key `j`.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub allowed: Rc<Vec<bool>>,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const PAIR_EPS: f64 = 1e-12;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned trainable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (k2, n) = (y.rows(), y.cols());
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(x.data(), y.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        assert_eq!(b.len(), n, "bias width");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k: T = c(GELU_K);
        let cc: T = c(GELU_C);
        let half: T = c(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (k * (x + cc * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        let ng = self.ng(a);
        self.push(t, Op::Softplus(a), ng)
    }

    /// Row-wise layer normalization with learned scale and offset.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let rows = x.len() / n.max(1);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let nf: T = c(n as f64);
        let eps: T = c(LN_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out);
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Divides each row by its sum. Rows must have a nonzero sum.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            let s: T = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows(a), ng)
    }

    /// Scales row `i` of `[m×n]` by `s[i]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let x = self.value(a);
        let sv = self.value(s);
        let n = x.cols();
        assert_eq!(sv.len(), x.len() / n.max(1), "mul_col length");
        let mut out = x.clone();
        for (row, &k) in out.data_mut().chunks_mut(n).zip(sv.data()) {
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulCol(a, s), ng)
    }

    /// Flat gather: output element `i` is `x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let x = self.value(a).data();
        let data = idx.iter().map(|&i| x[i]).collect();
        let t = Tensor::new(shape.to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::Gather { x: a, idx }, ng)
    }

    /// Gathers whole rows of a 2-D tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let n = self.value(a).cols();
        let mut idx = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            idx.extend(r * n..(r + 1) * n);
        }
        self.gather(a, Rc::new(idx), &[rows.len(), n])
    }

    /// `[out_rows×n]` tensor with `x[i]` accumulated into row `rows[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, rows: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let x = self.value(a);
        let n = x.cols();
        assert_eq!(rows.len() * n, x.len());
        let mut out = Tensor::zeros(&[out_rows, n]);
        for (i, &r) in rows.iter().enumerate() {
            let src = &x.data()[i * n..(i + 1) * n];
            let dst = &mut out.data_mut()[r * n..(r + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterAddRows { x: a, rows }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.is_empty() {
                continue;
            }
            assert_eq!(t.cols(), n, "concat_rows width");
            rows += t.len() / n;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, n], data);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Valid (unpadded) strided 1-D convolution.
    ///
    /// `x` is `[B, Cin, L]`, `w` is `[Cout, Cin, K]`, `b` is `[Cout]`; the
    /// result is `[B, Cout, (L - K) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.value(x);
        let ws = self.value(w);
        let (bsz, cin, len) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let (cout, cin2, k) = (ws.shape()[0], ws.shape()[1], ws.shape()[2]);
        assert_eq!(cin, cin2, "conv input channels");
        assert!(len >= k, "conv input shorter than kernel");
        let lo = (len - k) / stride + 1;
        let bias = self.value(b).data();
        let xd = xs.data();
        let wd = ws.data();
        let mut out = vec![T::zero(); bsz * cout * lo];
        for bi in 0..bsz {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * lo..(bi * cout + o + 1) * lo];
                for v in orow.iter_mut() {
                    *v = bias[o];
                }
                for i in 0..cin {
                    let xrow = &xd[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                    let wrow = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let seg = &xrow[t * stride..t * stride + k];
                        let mut acc = T::zero();
                        for (&a, &bw) in seg.iter().zip(wrow) {
                            acc += a * bw;
                        }
                        *ov += acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, cout, lo], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Conv1d { x, w, b, stride }, ng)
    }

    /// Multi-head scaled dot-product attention on pre-projected `q`, `k`, `v`
    /// (each `[S×d]`, heads laid out as contiguous column blocks).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Var {
        let qs = self.value(q);
        let ks = self.value(k);
        let vs = self.value(v);
        let s = qs.rows();
        let d = qs.cols();
        assert_eq!(d % heads, 0, "model width must divide by head count");
        let dh = d / heads;
        let scale: T = c(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * s * s];
        let mut out = vec![T::zero(); s * d];
        let (qd, kd, vd) = (qs.data(), ks.data(), vs.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let prow = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..s {
                    if let Some(m) = mask {
                        if !m.allowed[i * s + j] {
                            prow[j] = T::neg_infinity();
                            continue;
                        }
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    prow[j] = acc * scale;
                }
                softmax_in_place(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..s {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![s, d], out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Treats the flat data as consecutive `(a, b)` pairs and scales each to unit length.
    pub fn pair_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.len() % 2, 0);
        let eps: T = c(PAIR_EPS);
        let mut out = x.clone();
        for p in out.data_mut().chunks_mut(2) {
            let r = (p[0] * p[0] + p[1] * p[1] + eps).sqrt();
            p[0] /= r;
            p[1] /= r;
        }
        let ng = self.ng(a);
        self.push(out, Op::PairNormalize(a), ng)
    }

    /// Mean softmax cross-entropy of `[B×K]` logits against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let kdim = x.cols();
        let b = x.len() / kdim;
        assert_eq!(b, targets.len());
        let mut probs = x.data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(kdim).zip(targets) {
            assert!(t < kdim, "target class out of range");
            softmax_in_place(row);
            loss -= row[t].max(T::min_positive_value()).ln();
        }
        loss /= c(b as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.len(), t.len(), "mse length");
        let n: T = c(p.len() as f64);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let ng = self.ng(pred) || self.ng(target);
        self.push(Tensor::scalar(s), Op::Mse { pred, target }, ng)
    }

    /// Affine map `x · w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar root; the root's seed gradient is 1.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        self.slot(grads, v).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    let s = self.slot(grads, *b);
                    for (o, &x) in s.data_mut().iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let s = self.slot(grads, *a);
                    for ((o, &x), &y) in s.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let s = self.slot(grads, *b);
                    for ((o, &x), &y) in s.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, k) => {
                let s = self.slot(grads, *a);
                for (o, &x) in s.data_mut().iter_mut().zip(gd) {
                    *o += x * *k;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.ng(*a) {
                    let s = self.slot(grads, *a);
                    gemm_nt(gd, bv.data(), s.data_mut(), m, n, k);
                }
                if self.ng(*b) {
                    let s = self.slot(grads, *b);
                    gemm_tn(av.data(), gd, s.data_mut(), m, k, n);
                }
            }
            Op::AddBias(a, b) => {
                if self.ng(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.ng(*b) {
                    let n = g.cols();
                    let s = self.slot(grads, *b);
                    for row in gd.chunks(n) {
                        for (o, &x) in s.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let k: T = c(GELU_K);
                let cc: T = c(GELU_C);
                let half: T = c(0.5);
                let three: T = c(3.0);
                let xv = self.value(*a).data();
                let s = self.slot(grads, *a);
                for ((o, &dy), &x) in s.data_mut().iter_mut().zip(gd).zip(xv) {
                    let u = k * (x + cc * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + three * cc * x * x);
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                    *o += dy * d;
                }
            }
            Op::Softplus(a) => {
                let xv = self.value(*a).data();
                let s = self.slot(grads, *a);
                for ((o, &dy), &x) in s.data_mut().iter_mut().zip(gd).zip(xv) {
                    let sig = T::one() / (T::one() + (-x).exp());
                    *o += dy * sig;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gv = self.value(*gamma).data().to_vec();
                if self.ng(*gamma) {
                    let s = self.slot(grads, *gamma);
                    for (row, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &dy), &h) in s.data_mut().iter_mut().zip(row).zip(hrow) {
                            *o += dy * h;
                        }
                    }
                }
                if self.ng(*beta) {
                    let s = self.slot(grads, *beta);
                    for row in gd.chunks(n) {
                        for (o, &dy) in s.data_mut().iter_mut().zip(row) {
                            *o += dy;
                        }
                    }
                }
                if self.ng(*x) {
                    let nf: T = c(n as f64);
                    let s = self.slot(grads, *x);
                    let mut dxh = vec![T::zero(); n];
                    for (r, (row, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for j in 0..n {
                            dxh[j] = row[j] * gv[j];
                            sum += dxh[j];
                            sum_h += dxh[j] * hrow[j];
                        }
                        let inv = inv_std[r];
                        let orow = &mut s.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            orow[j] += inv / nf * (nf * dxh[j] - sum - hrow[j] * sum_h);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = g.cols();
                let y = node.value.data();
                let s = self.slot(grads, *a);
                for ((orow, yrow), grow) in s.data_mut().chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o += p * (q - dot);
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let n = g.cols();
                let y = node.value.data();
                let xv = self.value(*a).data();
                let s = self.slot(grads, *a);
                for (r, orow) in s.data_mut().chunks_mut(n).enumerate() {
                    let yrow = &y[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let sum: T = xv[r * n..(r + 1) * n].iter().copied().sum();
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for (o, &q) in orow.iter_mut().zip(grow) {
                        *o += (q - dot) / sum;
                    }
                }
            }
            Op::MulCol(a, sv) => {
                let n = g.cols();
                if self.ng(*a) {
                    let k = self.value(*sv).data();
                    let s = self.slot(grads, *a);
                    for ((orow, grow), &kv) in s.data_mut().chunks_mut(n).zip(gd.chunks(n)).zip(k) {
                        for (o, &q) in orow.iter_mut().zip(grow) {
                            *o += q * kv;
                        }
                    }
                }
                if self.ng(*sv) {
                    let xv = self.value(*a).data();
                    let s = self.slot(grads, *sv);
                    for (r, o) in s.data_mut().iter_mut().enumerate() {
                        let dot: T = xv[r * n..(r + 1) * n]
                            .iter()
                            .zip(&gd[r * n..(r + 1) * n])
                            .map(|(&p, &q)| p * q)
                            .sum();
                        *o += dot;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let s = self.slot(grads, *x);
                let sd = s.data_mut();
                for (&j, &q) in idx.iter().zip(gd) {
                    sd[j] += q;
                }
            }
            Op::ScatterAddRows { x, rows } => {
                let n = g.cols();
                let s = self.slot(grads, *x);
                for (i, &r) in rows.iter().enumerate() {
                    let orow = &mut s.data_mut()[i * n..(i + 1) * n];
                    for (o, &q) in orow.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += q;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) && len > 0 {
                        let s = self.slot(grads, p);
                        for (o, &q) in s.data_mut().iter_mut().zip(&gd[off..off + len]) {
                            *o += q;
                        }
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let s = self.slot(grads, *a);
                for (o, &q) in s.data_mut().iter_mut().zip(gd) {
                    *o += q;
                }
            }
            Op::SumAll(a) => {
                let s = self.slot(grads, *a);
                for o in s.data_mut() {
                    *o += gd[0];
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (bsz, cin, len) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let (cout, _, k) = (ws.shape()[0], ws.shape()[1], ws.shape()[2]);
                let lo = g.shape()[2];
                let stride = *stride;
                if self.ng(*b) {
                    let s = self.slot(grads, *b);
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let row = &gd[(bi * cout + o) * lo..(bi * cout + o + 1) * lo];
                            s.data_mut()[o] += row.iter().copied().sum();
                        }
                    }
                }
                if self.ng(*w) {
                    let xd = xs.data();
                    let s = self.slot(grads, *w);
                    let sd = s.data_mut();
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let grow = &gd[(bi * cout + o) * lo..(bi * cout + o + 1) * lo];
                            for i in 0..cin {
                                let xrow = &xd[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                                let wg = &mut sd[(o * cin + i) * k..(o * cin + i + 1) * k];
                                for (t, &q) in grow.iter().enumerate() {
                                    let seg = &xrow[t * stride..t * stride + k];
                                    for (wv, &xv) in wg.iter_mut().zip(seg) {
                                        *wv += q * xv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let wd = ws.data();
                    let s = self.slot(grads, *x);
                    let sd = s.data_mut();
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let grow = &gd[(bi * cout + o) * lo..(bi * cout + o + 1) * lo];
                            for i in 0..cin {
                                let wrow = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                                let xg = &mut sd[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                                for (t, &q) in grow.iter().enumerate() {
                                    let seg = &mut xg[t * stride..t * stride + k];
                                    for (xv, &wv) in seg.iter_mut().zip(wrow) {
                                        *xv += q * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let s = qs.rows();
                let d = qs.cols();
                let dh = d / heads;
                let scale: T = c(1.0 / (dh as f64).sqrt());
                let mut dq = vec![T::zero(); s * d];
                let mut dk = vec![T::zero(); s * d];
                let mut dv = vec![T::zero(); s * d];
                let (qd, kd, vd) = (qs.data(), ks.data(), vs.data());
                let mut dp = vec![T::zero(); s];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..s {
                        let prow = &probs[(h * s + i) * s..(h * s + i + 1) * s];
                        let gi = &gd[i * d + off..i * d + off + dh];
                        for j in 0..s {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            let p = prow[j];
                            if p != T::zero() {
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (o, &a) in dvj.iter_mut().zip(gi) {
                                    *o += p * a;
                                }
                            }
                        }
                        let dot: T = prow.iter().zip(&dp).map(|(&p, &x)| p * x).sum();
                        for j in 0..s {
                            let p = prow[j];
                            if p == T::zero() {
                                continue;
                            }
                            let ds = p * (dp[j] - dot) * scale;
                            for t in 0..dh {
                                dq[i * d + off + t] += ds * kd[j * d + off + t];
                                dk[j * d + off + t] += ds * qd[i * d + off + t];
                            }
                        }
                    }
                }
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.ng(var) {
                        let sl = self.slot(grads, var);
                        for (o, x) in sl.data_mut().iter_mut().zip(delta) {
                            *o += x;
                        }
                    }
                }
            }
            Op::PairNormalize(a) => {
                let xv = self.value(*a).data();
                let eps: T = c(PAIR_EPS);
                let s = self.slot(grads, *a);
                for ((o, x), q) in s.data_mut().chunks_mut(2).zip(xv.chunks(2)).zip(gd.chunks(2)) {
                    let r = (x[0] * x[0] + x[1] * x[1] + eps).sqrt();
                    let (u0, u1) = (x[0] / r, x[1] / r);
                    let dot = u0 * q[0] + u1 * q[1];
                    o[0] += (q[0] - u0 * dot) / r;
                    o[1] += (q[1] - u1 * dot) / r;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let kdim = self.value(*logits).cols();
                let bf: T = c(targets.len() as f64);
                let s = self.slot(grads, *logits);
                for (r, (orow, prow)) in s.data_mut().chunks_mut(kdim).zip(probs.chunks(kdim)).enumerate() {
                    for (j, (o, &p)) in orow.iter_mut().zip(prow).enumerate() {
                        let y = if j == targets[r] { T::one() } else { T::zero() };
                        *o += gd[0] * (p - y) / bf;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let n: T = c(p.len() as f64);
                let two: T = c(2.0);
                if self.ng(*pred) {
                    let s = self.slot(grads, *pred);
                    for ((o, &a), &b) in s.data_mut().iter_mut().zip(p).zip(t) {
                        *o += gd[0] * two * (a - b) / n;
                    }
                }
                if self.ng(*target) {
                    let s = self.slot(grads, *target);
                    for ((o, &a), &b) in s.data_mut().iter_mut().zip(p).zip(t) {
                        *o -= gd[0] * two * (a - b) / n;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax; `-inf` entries map to exactly zero.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if v.is_infinite() && *v < T::zero() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
