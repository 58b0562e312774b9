//! Prior-fitted transformer over row tokens.
//!
//! Each row becomes one token: a projection of its observed values (missing
//! entries zeroed) plus a projection of its mask, plus a label embedding on
//! context rows or a learned marker on query rows. The encoder lets context
//! rows attend to the context and each query attend to the context and
//! itself, so query outputs are independent of one another and of the order
//! of context rows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AttnMask, Tape, Var};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfnConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Accepted for configuration compatibility; only 0 is implemented.
    pub dropout: f64,
    pub activation: Activation,
    pub max_classes: usize,
    pub max_features: usize,
    pub distill_weight: f64,
    pub ln_eps: f64,
}

impl Default for PfnConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PfnConfig {
    pub fn desk() -> Self {
        Self {
            width: 64,
            layers: 3,
            heads: 2,
            ffn: 128,
            dropout: 0.0,
            activation: Activation::Gelu,
            max_classes: 10,
            max_features: 16,
            distill_weight: 0.0,
            ln_eps: 1e-5,
        }
    }

    pub fn paper() -> Self {
        Self {
            width: 512,
            layers: 12,
            heads: 4,
            ffn: 1024,
            max_features: 100,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.dropout > 0.0 {
            return Err(Error::Config("dropout > 0 is not supported".into()));
        }
        if self.layers == 0 || self.ffn == 0 || self.max_classes < 2 || self.max_features == 0 {
            return Err(Error::Config("layers, ffn, max_features must be positive and max_classes ≥ 2".into()));
        }
        if self.distill_weight < 0.0 || self.ln_eps <= 0.0 {
            return Err(Error::Config("distill weight must be ≥ 0 and ln_eps > 0".into()));
        }
        Ok(())
    }
}

/// Backbone outputs for one episode.
pub struct Forward {
    /// `n_query × max_classes`.
    pub logits: Var,
    /// Final normalized states `[context; queries] × width`.
    pub states: Var,
}

/// PFN backbone plus an optional flow head sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct PfnModel<T> {
    pub config: PfnConfig,
    pub flow: Option<FlowConfig>,
    pub params: ParamStore<T>,
}

pub(crate) fn param<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    match store.index_of(name) {
        Some(i) => Ok(tape.param(store, i)),
        None => Err(Error::Format(format!("missing parameter {name}"))),
    }
}

/// Pre-LN attention sublayer: `x + Wo·attn(LN(x)·Wq, kv·Wk, kv·Wv)`. With
/// `kv = None` it is self-attention on the normalized input.
pub(crate) fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    kv: Option<Var>,
    heads: usize,
    mask: AttnMask,
    eps: T,
) -> Result<Var> {
    let g = param(tape, store, &format!("{prefix}.ln_g"))?;
    let b = param(tape, store, &format!("{prefix}.ln_b"))?;
    let h = tape.layer_norm(x, g, b, eps)?;
    let src = kv.unwrap_or(h);
    let wq = param(tape, store, &format!("{prefix}.wq"))?;
    let wk = param(tape, store, &format!("{prefix}.wk"))?;
    let wv = param(tape, store, &format!("{prefix}.wv"))?;
    let wo = param(tape, store, &format!("{prefix}.wo"))?;
    let bo = param(tape, store, &format!("{prefix}.bo"))?;
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(src, wk)?;
    let v = tape.matmul(src, wv)?;
    let a = tape.attention(q, k, v, heads, mask)?;
    let o = tape.matmul(a, wo)?;
    let o = tape.add_row(o, bo)?;
    tape.add(x, o)
}

pub(crate) fn ffn_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    act: Activation,
    eps: T,
) -> Result<Var> {
    let g = param(tape, store, &format!("{prefix}.ln_g"))?;
    let b = param(tape, store, &format!("{prefix}.ln_b"))?;
    let h = tape.layer_norm(x, g, b, eps)?;
    let w1 = param(tape, store, &format!("{prefix}.w1"))?;
    let b1 = param(tape, store, &format!("{prefix}.b1"))?;
    let w2 = param(tape, store, &format!("{prefix}.w2"))?;
    let b2 = param(tape, store, &format!("{prefix}.b2"))?;
    let h = tape.matmul(h, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.activation(h, act);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row(h, b2)?;
    tape.add(x, h)
}

pub(crate) fn init_attention<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, w: usize, rng: &mut seed::Rng) {
    store.insert_const(format!("{prefix}.ln_g"), &[1, w], 1.0);
    store.insert_const(format!("{prefix}.ln_b"), &[1, w], 0.0);
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(format!("{prefix}.{name}"), &[w, w], w, rng);
    }
    store.insert_const(format!("{prefix}.bo"), &[1, w], 0.0);
}

pub(crate) fn init_ffn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, w: usize, f: usize, rng: &mut seed::Rng) {
    store.insert_const(format!("{prefix}.ln_g"), &[1, w], 1.0);
    store.insert_const(format!("{prefix}.ln_b"), &[1, w], 0.0);
    store.insert_normal(format!("{prefix}.w1"), &[w, f], w, rng);
    store.insert_const(format!("{prefix}.b1"), &[1, f], 0.0);
    store.insert_normal(format!("{prefix}.w2"), &[f, w], f, rng);
    store.insert_const(format!("{prefix}.b2"), &[1, w], 0.0);
}

/// Pads `n × d` to `n × max` with zero columns.
pub(crate) fn pad_cols<T: Scalar>(x: &Tensor<f64>, max: usize) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, max]);
    for i in 0..n {
        for j in 0..d {
            out.set(i, j, T::of(x.at(i, j)));
        }
    }
    out
}

impl<T: Scalar> PfnModel<T> {
    pub fn new(config: PfnConfig, flow: Option<FlowConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(f) = &flow {
            f.validate()?;
        }
        let mut rng = seed::stream(seed, &[seed::TAG_INIT]);
        let (w, f, c) = (config.width, config.ffn, config.max_features);
        let mut params = ParamStore::new();
        params.insert_normal("embed.value_w", &[c, w], c, &mut rng);
        params.insert_const("embed.value_b", &[1, w], 0.0);
        params.insert_normal("embed.mask_w", &[c, w], c, &mut rng);
        params.insert_const("embed.mask_b", &[1, w], 0.0);
        params.insert_normal("embed.label", &[config.max_classes, w], 1, &mut rng);
        params.insert_normal("embed.query", &[1, w], 1, &mut rng);
        for l in 0..config.layers {
            init_attention(&mut params, &format!("enc{l}.attn"), w, &mut rng);
            init_ffn(&mut params, &format!("enc{l}.ffn"), w, f, &mut rng);
        }
        params.insert_const("out.ln_g", &[1, w], 1.0);
        params.insert_const("out.ln_b", &[1, w], 0.0);
        params.insert_normal("out.w", &[w, config.max_classes], w, &mut rng);
        params.insert_const("out.b", &[1, config.max_classes], 0.0);
        if let Some(fc) = &flow {
            crate::flow::init_flow_params(&mut params, &config, fc, &mut seed::stream(seed, &[seed::TAG_INIT, seed::TAG_FLOW]));
        }
        Ok(Self { config, flow, params })
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        if ep.n_features() > self.config.max_features {
            return Err(Error::dim(
                "pfn",
                format!("{} features exceed the model limit {}", ep.n_features(), self.config.max_features),
            ));
        }
        if ep.n_classes > self.config.max_classes {
            return Err(Error::dim(
                "pfn",
                format!("{} classes exceed the model limit {}", ep.n_classes, self.config.max_classes),
            ));
        }
        Ok(())
    }

    /// Row tokens for standardized observed values `x` (zeros where missing)
    /// and 0/1 mask `m`. Context rows pass their labels; query rows `None`.
    pub fn embed_rows(&self, tape: &mut Tape<T>, x: &Tensor<f64>, m: &Tensor<f64>, labels: Option<&[usize]>) -> Result<Var> {
        if x.cols() > self.config.max_features || x.shape() != m.shape() {
            return Err(Error::dim(
                "embed_rows",
                format!("values {:?}, mask {:?}, max features {}", x.shape(), m.shape(), self.config.max_features),
            ));
        }
        let n = x.rows();
        let mut xo = x.clone();
        for (v, &mk) in xo.data_mut().iter_mut().zip(m.data()) {
            if mk > 0.5 {
                *v = 0.0;
            }
        }
        let p = &self.params;
        let xv = tape.constant(pad_cols(&xo, self.config.max_features));
        let mv = tape.constant(pad_cols(m, self.config.max_features));
        let vw = param(tape, p, "embed.value_w")?;
        let vb = param(tape, p, "embed.value_b")?;
        let mw = param(tape, p, "embed.mask_w")?;
        let mb = param(tape, p, "embed.mask_b")?;
        let val = tape.matmul(xv, vw)?;
        let val = tape.add_row(val, vb)?;
        let msk = tape.matmul(mv, mw)?;
        let msk = tape.add_row(msk, mb)?;
        let tok = tape.add(val, msk)?;
        match labels {
            Some(y) => {
                if y.len() != n || y.iter().any(|&c| c >= self.config.max_classes) {
                    return Err(Error::Contract("context labels do not match rows or class limit".into()));
                }
                let mut onehot = Tensor::zeros(&[n, self.config.max_classes]);
                for (i, &c) in y.iter().enumerate() {
                    onehot.set(i, c, T::one());
                }
                let oh = tape.constant(onehot);
                let emb = param(tape, p, "embed.label")?;
                let lab = tape.matmul(oh, emb)?;
                tape.add(tok, lab)
            }
            None => {
                let q = param(tape, p, "embed.query")?;
                tape.add_row(tok, q)
            }
        }
    }

    /// Encoder over `[context; queries]` followed by the class head. The
    /// context may be empty; each query row then attends only to itself.
    pub fn encode(&self, tape: &mut Tape<T>, ctx: Var, qry: Var) -> Result<Forward> {
        let n_ctx = tape.shape(ctx)[0];
        let n_q = tape.shape(qry)[0];
        if n_q == 0 {
            return Err(Error::Contract("forward needs at least one query row".into()));
        }
        let cfg = &self.config;
        let eps = T::of(cfg.ln_eps);
        let p = &self.params;
        let mut h = tape.concat_rows(&[ctx, qry])?;
        for l in 0..cfg.layers {
            h = attention_block(tape, p, &format!("enc{l}.attn"), h, None, cfg.heads, AttnMask::ContextQuery { n_ctx }, eps)?;
            h = ffn_block(tape, p, &format!("enc{l}.ffn"), h, cfg.activation, eps)?;
        }
        let g = param(tape, p, "out.ln_g")?;
        let b = param(tape, p, "out.ln_b")?;
        let states = tape.layer_norm(h, g, b, eps)?;
        let q_idx: Vec<usize> = (n_ctx..n_ctx + n_q).collect();
        let hq = tape.select_rows(states, &q_idx)?;
        let w = param(tape, p, "out.w")?;
        let bo = param(tape, p, "out.b")?;
        let logits = tape.matmul(hq, w)?;
        let logits = tape.add_row(logits, bo)?;
        Ok(Forward { logits, states })
    }

    pub fn forward(&self, tape: &mut Tape<T>, ep: &Episode) -> Result<Forward> {
        self.check_episode(ep)?;
        let ctx = self.embed_rows(tape, &ep.x_ctx, &ep.m_ctx, Some(&ep.y_ctx))?;
        let qry = self.embed_rows(tape, &ep.x_q, &ep.m_q, None)?;
        self.encode(tape, ctx, qry)
    }

    /// Mean query cross-entropy; requires query labels.
    pub fn ce_loss(&self, tape: &mut Tape<T>, fwd: &Forward, ep: &Episode) -> Result<Var> {
        let y = ep
            .y_q
            .as_ref()
            .ok_or_else(|| Error::Contract("cross-entropy needs query labels".into()))?;
        tape.cross_entropy(fwd.logits, y, ep.n_classes)
    }

    /// Class probabilities per query (`n_query × n_classes`), softmax over the
    /// task's classes only.
    pub fn predict(&self, ep: &Episode) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ep)?;
        Ok(softmax_rows(&tape.value(fwd.logits).cast::<f64>(), ep.n_classes))
    }
}

/// Row softmax over the first `c` columns, evaluated in f64.
pub fn softmax_rows(logits: &Tensor<f64>, c: usize) -> Tensor<f64> {
    let n = logits.rows();
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let row = &logits.row(i)[..c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        for (k, &v) in row.iter().enumerate() {
            out.set(i, k, (v - max).exp() / z);
        }
    }
    out
}
