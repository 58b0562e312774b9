//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op computes its value eagerly and records enough state for its
//! vector-Jacobian product. `Tape::backward` replays the tape in reverse and
//! returns one gradient tensor per entry of the [`ParamStore`]; parameters the
//! forward pass never touched get zeros.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
    Relu,
    #[default]
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// `sqrt(2/pi)` and the cubic coefficient of the tanh-form GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
            }
        }
    }
}

/// Which keys each attention query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Self-attention over `[context; queries]`: context rows see the
    /// context; query rows see the context and themselves only.
    ContextQuery { n_ctx: usize },
    /// Self-attention restricted to consecutive groups of `size` rows.
    Blocks { size: usize },
    /// Cross-attention into keys `[context; one state per group]`: query row
    /// `i` sees the context and the state of its group `i / group`.
    ContextPlusGroup { n_ctx: usize, group: usize },
}

impl AttnMask {
    fn keys(self, i: usize, n_keys: usize) -> (std::ops::Range<usize>, Option<usize>) {
        match self {
            AttnMask::Full => (0..n_keys, None),
            AttnMask::ContextQuery { n_ctx } => {
                if i < n_ctx {
                    (0..n_ctx, None)
                } else {
                    (0..n_ctx, Some(i))
                }
            }
            AttnMask::Blocks { size } => {
                let start = i / size * size;
                (start..start + size, None)
            }
            AttnMask::ContextPlusGroup { n_ctx, group } => (0..n_ctx, Some(n_ctx + i / group)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<T>,
        offsets: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Reduce(Var, Reduction),
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        n_classes: usize,
        probs: Vec<T>,
    },
    MaskedSse {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        denom: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<usize>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records parameter `idx` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, idx: usize) -> Var {
        let v = self.push(store.tensor(idx).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(idx);
        v
    }

    /// Copies `v` into a constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let m = av.cols();
        if rv.len() != m {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a (n×m) * col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.len() != av.rows() {
            return Err(Error::dim(
                "mul_col",
                format!("{:?} * {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|x| kind.apply(x));
        self.push(out, Op::Act(a, kind))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each 1×m).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != m || b.len() != m {
            return Err(Error::dim("layer_norm", format!("width {m}")));
        }
        let mut xhat = vec![T::zero(); n * m];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(&[n, m]);
        let mf = T::from_usize(m).unwrap();
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention (projections are separate ops).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, w) = (qv.rows(), qv.cols());
        let m = kv.rows();
        if kv.cols() != w || vv.cols() != w || vv.rows() != m || heads == 0 || w % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} heads {heads}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let dk = w / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut out = Tensor::zeros(&[n, w]);
        let mut probs = Vec::new();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut scores = Vec::new();
        for i in 0..n {
            offsets.push(probs.len());
            let (range, extra) = mask.keys(i, m);
            if range.end > m || extra.is_some_and(|e| e >= m) {
                return Err(Error::dim("attention", format!("mask reaches past {m} keys")));
            }
            let keys: Vec<usize> = range.chain(extra).collect();
            let qi = qv.row(i);
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                scores.clear();
                let mut max = T::neg_infinity();
                for &j in &keys {
                    let kj = &kv.row(j)[cols.clone()];
                    let s = qi[cols.clone()]
                        .iter()
                        .zip(kj)
                        .map(|(&a, &b)| a * b)
                        .sum::<T>()
                        * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (&j, &e) in keys.iter().zip(scores.iter()) {
                    let p = e / z;
                    probs.push(p);
                    for (o, &vjc) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += p * vjc;
                    }
                }
            }
        }
        offsets.push(probs.len());
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                offsets,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.iter().any(|&i| i >= av.rows()) {
            return Err(Error::dim("select_rows", "row index out of range"));
        }
        let out = av.select_rows(idx);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Reduce(a, Reduction::Sum))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::from_usize(t.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Reduce(a, Reduction::Mean))
    }

    /// Mean cross-entropy of `logits` (n×C_max) against hard labels, with the
    /// softmax restricted to the first `n_classes` columns.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
        let n = self.value(logits).rows();
        if labels.len() != n || labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {n} rows, classes {n_classes}",
                labels.len()
            )));
        }
        let mut targets = vec![T::zero(); n * n_classes];
        for (r, &y) in labels.iter().enumerate() {
            targets[r * n_classes + y] = T::one();
        }
        self.soft_cross_entropy(logits, targets, n_classes)
    }

    /// Cross-entropy against target distributions (`n × n_classes`, row-major).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Vec<T>, n_classes: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (n, cmax) = (lv.rows(), lv.cols());
        if n_classes == 0 || n_classes > cmax || targets.len() != n * n_classes || n == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?}, classes {n_classes}", lv.shape()),
            ));
        }
        let mut probs = vec![T::zero(); n * n_classes];
        let mut loss = T::zero();
        for r in 0..n {
            let row = &lv.row(r)[..n_classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for c in 0..n_classes {
                let logp = row[c] - lse;
                probs[r * n_classes + c] = logp.exp();
                let t = targets[r * n_classes + c];
                if t > T::zero() {
                    loss -= t * logp;
                }
            }
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                n_classes,
                probs,
            },
        ))
    }

    /// `Σ_{mask} (pred − target)² / denom`.
    pub fn masked_sse(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool], denom: T) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.len() != pv.len() {
            return Err(Error::dim(
                "masked_sse",
                format!("pred {:?} target {:?}", pv.shape(), target.shape()),
            ));
        }
        let mut s = T::zero();
        for ((&p, &t), &m) in pv.data().iter().zip(target.data()).zip(mask) {
            if m {
                s += (p - t) * (p - t);
            }
        }
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::MaskedSse {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                denom,
            },
        ))
    }

    /// Gradients of scalar `loss` with respect to every parameter in `store`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out: Vec<Tensor<T>> = (0..store.len())
            .map(|i| Tensor::zeros(store.tensor(i).shape()))
            .collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(p) = node.param {
                let dst = out[p].data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let ga = grad_buf(grads, *a, av.shape());
                matmul_nt_into(g.data(), bv.data(), ga.data_mut(), n, m, k);
                let gb = grad_buf(grads, *b, bv.shape());
                matmul_tn_into(av.data(), g.data(), gb.data_mut(), n, k, m);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.data(), g.shape());
                accumulate(grads, *b, g.data(), g.shape());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.data(), g.shape());
                let neg: Vec<T> = g.data().iter().map(|&x| -x).collect();
                accumulate(grads, *b, &neg, g.shape());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<T> = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let gb: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, &ga, g.shape());
                accumulate(grads, *b, &gb, g.shape());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.data(), g.shape());
                let rshape = val(*row).shape().to_vec();
                let gr = grad_buf(grads, *row, &rshape);
                let m = g.cols();
                for r in 0..g.rows() {
                    for (d, &s) in gr.data_mut().iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *d += s;
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                let m = g.cols();
                let mut ga = vec![T::zero(); g.len()];
                let mut gc = vec![T::zero(); cv.len()];
                for r in 0..g.rows() {
                    let s = cv.data()[r];
                    let grow = &g.data()[r * m..(r + 1) * m];
                    let arow = av.row(r);
                    let mut acc = T::zero();
                    for c in 0..m {
                        ga[r * m + c] = grow[c] * s;
                        acc += grow[c] * arow[c];
                    }
                    gc[r] = acc;
                }
                accumulate(grads, *a, &ga, g.shape());
                accumulate(grads, *col, &gc, cv.shape());
            }
            Op::Scale(a, s) => {
                let ga: Vec<T> = g.data().iter().map(|&x| x * *s).collect();
                accumulate(grads, *a, &ga, g.shape());
            }
            Op::Act(a, kind) => {
                let av = val(*a);
                let ga: Vec<T> = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gy, &x)| gy * kind.derivative(x))
                    .collect();
                accumulate(grads, *a, &ga, g.shape());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let (n, m) = (g.rows(), g.cols());
                let mf = T::from_usize(m).unwrap();
                let mut gx = vec![T::zero(); n * m];
                let mut gg = vec![T::zero(); m];
                let mut gbeta = vec![T::zero(); m];
                let mut dxhat = vec![T::zero(); m];
                for r in 0..n {
                    let grow = &g.data()[r * m..(r + 1) * m];
                    let hrow = &xhat[r * m..(r + 1) * m];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for c in 0..m {
                        gg[c] += grow[c] * hrow[c];
                        gbeta[c] += grow[c];
                        dxhat[c] = grow[c] * gam.data()[c];
                        sum_d += dxhat[c];
                        sum_dh += dxhat[c] * hrow[c];
                    }
                    let is = inv_std[r];
                    for c in 0..m {
                        gx[r * m + c] = is / mf * (mf * dxhat[c] - sum_d - hrow[c] * sum_dh);
                    }
                }
                accumulate(grads, *x, &gx, g.shape());
                let gshape = gam.shape().to_vec();
                accumulate(grads, *gamma, &gg, &gshape);
                let bshape = val(*beta).shape().to_vec();
                accumulate(grads, *beta, &gbeta, &bshape);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
                offsets,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (n, w, m) = (qv.rows(), qv.cols(), kv.rows());
                let dk = w / heads;
                let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
                let mut gq = vec![T::zero(); n * w];
                let mut gk = vec![T::zero(); m * w];
                let mut gv = vec![T::zero(); m * w];
                let mut dp = Vec::new();
                for i in 0..n {
                    let (range, extra) = mask.keys(i, m);
                    let keys: Vec<usize> = range.chain(extra).collect();
                    let nk = keys.len();
                    let gi = g.row(i);
                    let qi = qv.row(i);
                    for h in 0..*heads {
                        let c0 = h * dk;
                        let p = &probs[offsets[i] + h * nk..offsets[i] + (h + 1) * nk];
                        dp.clear();
                        let mut s = T::zero();
                        for (t, &j) in keys.iter().enumerate() {
                            let vj = &vv.row(j)[c0..c0 + dk];
                            let d = gi[c0..c0 + dk].iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                            dp.push(d);
                            s += p[t] * d;
                            for c in 0..dk {
                                gv[j * w + c0 + c] += p[t] * gi[c0 + c];
                            }
                        }
                        for (t, &j) in keys.iter().enumerate() {
                            let ds = p[t] * (dp[t] - s) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &kv.row(j)[c0..c0 + dk];
                            for c in 0..dk {
                                gq[i * w + c0 + c] += ds * kj[c];
                                gk[j * w + c0 + c] += ds * qi[c0 + c];
                            }
                        }
                    }
                }
                accumulate(grads, *q, &gq, qv.shape());
                let ks = kv.shape().to_vec();
                accumulate(grads, *k, &gk, &ks);
                let vs = vv.shape().to_vec();
                accumulate(grads, *v, &gv, &vs);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let len = val(p).len();
                    accumulate(grads, p, &g.data()[off..off + len], &shape);
                    off += len;
                }
            }
            Op::SelectRows(a, idx) => {
                let shape = val(*a).shape().to_vec();
                let m = g.cols();
                let ga = grad_buf(grads, *a, &shape);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..m {
                        ga.data_mut()[src * m + c] += g.data()[r * m + c];
                    }
                }
            }
            Op::Reduce(a, red) => {
                let av = val(*a);
                let s = match red {
                    Reduction::Sum => g.data()[0],
                    Reduction::Mean => g.data()[0] / T::from_usize(av.len().max(1)).unwrap(),
                };
                let ga = vec![s; av.len()];
                let shape = av.shape().to_vec();
                accumulate(grads, *a, &ga, &shape);
            }
            Op::CrossEntropy {
                logits,
                targets,
                n_classes,
                probs,
            } => {
                let lv = val(*logits);
                let (n, cmax) = (lv.rows(), lv.cols());
                let s = g.data()[0] / T::from_usize(n).unwrap();
                let mut gl = vec![T::zero(); n * cmax];
                for r in 0..n {
                    let tsum: T = targets[r * n_classes..(r + 1) * n_classes].iter().copied().sum();
                    for c in 0..*n_classes {
                        gl[r * cmax + c] =
                            s * (tsum * probs[r * n_classes + c] - targets[r * n_classes + c]);
                    }
                }
                let shape = lv.shape().to_vec();
                accumulate(grads, *logits, &gl, &shape);
            }
            Op::MaskedSse {
                pred,
                target,
                mask,
                denom,
            } => {
                let pv = val(*pred);
                let two = T::of(2.0) * g.data()[0] / *denom;
                let gp: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| if m { two * (p - t) } else { T::zero() })
                    .collect();
                let shape = pv.shape().to_vec();
                accumulate(grads, *pred, &gp, &shape);
            }
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &[T], shape: &[usize]) {
    let buf = grad_buf(grads, v, shape);
    for (d, &s) in buf.data_mut().iter_mut().zip(g) {
        *d += s;
    }
}
