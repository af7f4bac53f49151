//! Transformer building blocks on top of [`crate::tensor`].
//!
//! Weights live in a [`ParamStore`]; every forward pass binds them into a
//! fresh [`Ctx`] (graph plus dropout state). Sublayers use post-norm wiring
//! by default: `LN(x + sublayer(x))`. Setting `pre_norm` switches to
//! `x + sublayer(LN(x))`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

/// Truncated-normal initialiser (values beyond two standard deviations are
/// redrawn).
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, self.std).expect("positive std");
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * self.std {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }
}

/// One forward pass: a graph with every parameter bound as a leaf.
pub struct Ctx {
    pub graph: Graph,
    vars: Vec<Var>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    /// Binds all parameters of `store`; they carry gradients iff
    /// `requires_grad`.
    pub fn new(store: &ParamStore, requires_grad: bool) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .values
            .iter()
            .map(|v| graph.shared_leaf(Arc::clone(v), requires_grad))
            .collect();
        Self {
            graph,
            vars,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Enables train-time dropout with a seeded mask generator.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = rate;
            self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of every parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get(v).unwrap_or_else(|| Tensor::zeros(self.graph.shape(v))))
            .collect()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.dropout;
        let shape = self.graph.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.graph.constant(Tensor::new(shape, mask)?);
        Ok(self.graph.mul(x, m)?)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = self.graph.matmul(x, self.p(w))?;
        Ok(self.graph.add_bias(y, self.p(b))?)
    }

    fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        Ok(self.graph.layer_norm(x, self.p(gamma), self.p(beta), LN_EPS)?)
    }
}

/// Row lookup of token embeddings.
pub fn embed(ctx: &mut Ctx, tokens: &[usize], table: ParamId) -> Result<Var> {
    Ok(ctx.graph.gather_rows(ctx.p(table), tokens)?)
}

/// Adds the first `len` rows of a learned position table.
pub fn add_positions(ctx: &mut Ctx, x: Var, pos_table: ParamId) -> Result<Var> {
    let len = ctx.graph.value(x).rows();
    let limit = ctx.graph.value(ctx.p(pos_table)).rows();
    if len > limit {
        return Err(Error::Capacity {
            what: "position table",
            len,
            limit,
        });
    }
    let pos = ctx.graph.slice_rows(ctx.p(pos_table), 0, len)?;
    Ok(ctx.graph.add(x, pos)?)
}

/// Affine classification head: `x · W + b`.
pub fn linear_head(ctx: &mut Ctx, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    ctx.linear(x, w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvSource {
    SelfAttention,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub causal: bool,
    pub kv_source: KvSource,
    pub pre_norm: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize, causal: bool, kv_source: KvSource) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            causal,
            kv_source,
            pre_norm: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) || self.head_dim() == 0 {
            return Err(Error::Config(format!(
                "model dim {} is not divisible into {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.causal && self.kv_source == KvSource::Cross {
            return Err(Error::Contract("causal masking requires self-attention".into()));
        }
        Ok(())
    }
}

/// Q/K/V/output projections and the sublayer norm of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl AttentionWeights {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, prefix: &str, d: usize) -> Self {
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), init.trunc_normal(&[d, d]));
        let (wq, wk, wv, wo) = (mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        let mut zeros = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[d]));
        let (bq, bk, bv, bo, ln_beta) = (zeros("bq"), zeros("bk"), zeros("bv"), zeros("bo"), zeros("ln_beta"));
        let ln_gamma = store.add(format!("{prefix}.ln_gamma"), Tensor::ones(&[d]));
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln_gamma,
            ln_beta,
        }
    }
}

/// Position-wise feed-forward weights with their sublayer norm.
#[derive(Clone, Debug)]
pub struct FeedForwardWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FeedForwardWeights {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), init.trunc_normal(&[d, d * mult])),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d * mult])),
            w2: store.add(format!("{prefix}.w2"), init.trunc_normal(&[d * mult, d])),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
            ln_gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::ones(&[d])),
            ln_beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[d])),
        }
    }
}

/// Intermediate values of one attention call, exposed for inspection.
pub struct AttentionTrace {
    /// Per-head attention distributions, each `[Lq×Lk]`.
    pub weights: Vec<Var>,
    /// Concatenated head outputs before the output projection.
    pub context: Var,
    /// After the output projection.
    pub projected: Var,
    /// After residual and norm.
    pub output: Var,
}

pub fn attention(ctx: &mut Ctx, q_in: Var, kv_in: Var, w: &AttentionWeights, cfg: &AttentionConfig) -> Result<Var> {
    Ok(attention_trace(ctx, q_in, kv_in, w, cfg)?.output)
}

/// Multi-head scaled dot-product attention with residual and norm.
pub fn attention_trace(
    ctx: &mut Ctx,
    q_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    cfg: &AttentionConfig,
) -> Result<AttentionTrace> {
    cfg.validate()?;
    if cfg.kv_source == KvSource::SelfAttention && q_in != kv_in {
        return Err(Error::Contract(
            "self-attention needs the same query and key/value input".into(),
        ));
    }
    let d = ctx.value(q_in).cols();
    if d != cfg.model_dim || ctx.value(kv_in).cols() != cfg.model_dim {
        return Err(Error::Contract(format!(
            "attention inputs must have width {}, got {d} and {}",
            cfg.model_dim,
            ctx.value(kv_in).cols()
        )));
    }

    let q_src = if cfg.pre_norm {
        ctx.norm(q_in, w.ln_gamma, w.ln_beta)?
    } else {
        q_in
    };
    let kv_src = match cfg.kv_source {
        KvSource::SelfAttention => q_src,
        KvSource::Cross => kv_in,
    };
    let q = ctx.linear(q_src, w.wq, w.bq)?;
    let k = ctx.linear(kv_src, w.wk, w.bk)?;
    let v = ctx.linear(kv_src, w.wv, w.bv)?;

    let lq = ctx.value(q).rows();
    let lk = ctx.value(k).rows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mask = if cfg.causal {
        let data = (0..lq * lk)
            .map(|i| if i % lk > i / lk { MASK_VALUE } else { 0.0 })
            .collect();
        Some(ctx.graph.constant(Tensor::new(vec![lq, lk], data)?))
    } else {
        None
    };

    let mut weights = Vec::with_capacity(cfg.num_heads);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let g = &mut ctx.graph;
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let a = g.softmax(scores, 1)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let context = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.graph.concat_cols(&heads)?
    };
    let projected = ctx.linear(context, w.wo, w.bo)?;
    let dropped = ctx.dropout(projected)?;
    let residual = ctx.graph.add(q_in, dropped)?;
    let output = if cfg.pre_norm {
        residual
    } else {
        ctx.norm(residual, w.ln_gamma, w.ln_beta)?
    };
    Ok(AttentionTrace {
        weights,
        context,
        projected,
        output,
    })
}

/// Position-wise feed-forward sublayer: linear → GELU → linear, with
/// residual and norm.
pub fn pffn(ctx: &mut Ctx, x: Var, w: &FeedForwardWeights, pre_norm: bool) -> Result<Var> {
    let h = if pre_norm {
        ctx.norm(x, w.ln_gamma, w.ln_beta)?
    } else {
        x
    };
    let h = ctx.linear(h, w.w1, w.b1)?;
    let h = ctx.graph.gelu(h);
    let h = ctx.linear(h, w.w2, w.b2)?;
    let h = ctx.dropout(h)?;
    let r = ctx.graph.add(x, h)?;
    if pre_norm {
        Ok(r)
    } else {
        ctx.norm(r, w.ln_gamma, w.ln_beta)
    }
}

/// Self-attention followed by a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: AttentionWeights,
    pub ffn: FeedForwardWeights,
}

impl EncoderBlock {
    pub fn init(store: &mut ParamStore, init: &mut Initializer, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            attn: AttentionWeights::init(store, init, &format!("{prefix}.attn"), d),
            ffn: FeedForwardWeights::init(store, init, &format!("{prefix}.ffn"), d, mult),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, cfg: &AttentionConfig) -> Result<Var> {
        let h = attention(ctx, x, x, &self.attn, cfg)?;
        pffn(ctx, h, &self.ffn, cfg.pre_norm)
    }
}

/// Finite-difference check of every parameter of `store` against the
/// gradient of the scalar produced by `f`.
///
/// Returns `(parameter name, max relative error)` per parameter.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, true);
    let loss = f(&mut ctx)?;
    let grads = ctx.graph.backward(loss)?;
    let analytic = ctx.param_grads(&grads);
    drop(ctx);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::new(s, false);
        let out = f(&mut ctx)?;
        Ok(ctx.value(out).item())
    };
    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut worst: f64 = 0.0;
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        report.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
