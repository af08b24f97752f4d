//! Masked multi-head attention encoder/decoder stacks.
//!
//! Layers follow the post-norm arrangement: each sublayer's output is
//! added to its input and the sum is layer-normalized. Encoder layers are
//! masked self-attention followed by a feed-forward block; decoder layers
//! add masked cross-attention over the encoder output in between. All
//! attention projections are bias-free; feed-forward blocks use ReLU and
//! carry biases.
//!
//! Attention masks make two behaviors possible: hiding blank
//! (all-background) tokens from every query, and causal decoding where a
//! position only sees its predecessors.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId};
use crate::params::{GraphParams, ParamStore};
use crate::tensor::Tensor;

/// Geometry of one encoder or decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("stack dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal position table: `pe[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos, 2i+1] = cos(pos / 10000^(2i/d))`. Requires even `d`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs even dimension, got {d}"
        )));
    }
    let mut pe = Tensor::zeros(n, d);
    for pos in 0..n {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Linear-layer initialization: N(0, 1/fan_in) keeps pre-activation
/// variance roughly unit for unit-variance inputs.
pub fn init_linear<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn init_attn<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), init_linear(d, d, rng))?;
    }
    Ok(())
}

fn init_ln(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gain"), Tensor::filled(1, d, 1.0))?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(1, d))?;
    Ok(())
}

fn init_ff<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(&format!("{prefix}.w1"), init_linear(d, d_ff, rng))?;
    store.insert(&format!("{prefix}.b1"), Tensor::zeros(1, d_ff))?;
    store.insert(&format!("{prefix}.w2"), init_linear(d_ff, d, rng))?;
    store.insert(&format!("{prefix}.b2"), Tensor::zeros(1, d))?;
    Ok(())
}

/// Create all parameters of an encoder stack under `prefix`.
pub fn init_encoder_stack<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &StackConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.n_layers {
        init_attn(store, &format!("{prefix}.{i}.attn"), cfg.d_model, rng)?;
        init_ln(store, &format!("{prefix}.{i}.ln1"), cfg.d_model)?;
        init_ff(store, &format!("{prefix}.{i}.ff"), cfg.d_model, cfg.d_ff, rng)?;
        init_ln(store, &format!("{prefix}.{i}.ln2"), cfg.d_model)?;
    }
    Ok(())
}

/// Create all parameters of a decoder stack under `prefix`.
pub fn init_decoder_stack<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &StackConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.n_layers {
        init_attn(store, &format!("{prefix}.{i}.self"), cfg.d_model, rng)?;
        init_ln(store, &format!("{prefix}.{i}.ln1"), cfg.d_model)?;
        init_attn(store, &format!("{prefix}.{i}.cross"), cfg.d_model, rng)?;
        init_ln(store, &format!("{prefix}.{i}.ln2"), cfg.d_model)?;
        init_ff(store, &format!("{prefix}.{i}.ff"), cfg.d_model, cfg.d_ff, rng)?;
        init_ln(store, &format!("{prefix}.{i}.ln3"), cfg.d_model)?;
    }
    Ok(())
}

/// Fresh store holding one encoder stack (gradient-check convenience).
pub fn init_stack<R: Rng>(cfg: &StackConfig, prefix: &str, rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_encoder_stack(&mut store, prefix, cfg, rng)?;
    Ok(store)
}

/// Create the output head mapping d_model to per-token pixel values.
pub fn init_generator<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), init_linear(d_model, out_dim, rng))?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(1, out_dim))?;
    Ok(())
}

/// Masked multi-head attention with explicit projection nodes.
///
/// `q_in` is `n_q x d_model`, `kv_in` is `n_k x d_model`; the mask must be
/// `n_q x n_k`. Heads are column slices of the joint projections; their
/// outputs are concatenated and projected by `wo`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_masked_attention(
    g: &mut Graph,
    q_in: NodeId,
    kv_in: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    n_heads: usize,
    mask: &Rc<AttnMask>,
) -> Result<NodeId> {
    let d_model = g.value(wq).cols();
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "cannot split {d_model} columns into {n_heads} heads"
        )));
    }
    let n_q = g.value(q_in).rows();
    let n_k = g.value(kv_in).rows();
    if mask.rows() != n_q || mask.cols() != n_k {
        return Err(Error::Shape(format!(
            "mask {}x{} does not fit {n_q} queries and {n_k} keys",
            mask.rows(),
            mask.cols()
        )));
    }
    let d_head = d_model / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let qh = g.slice_cols(q, cols.clone())?;
        let kh = g.slice_cols(k, cols.clone())?;
        let vh = g.slice_cols(v, cols)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let attn = g.masked_softmax(scaled, Rc::clone(mask))?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, wo)
}

fn attention_sublayer(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    n_heads: usize,
    mask: &Rc<AttnMask>,
) -> Result<NodeId> {
    let wq = bound.node(g, store, &format!("{prefix}.wq"))?;
    let wk = bound.node(g, store, &format!("{prefix}.wk"))?;
    let wv = bound.node(g, store, &format!("{prefix}.wv"))?;
    let wo = bound.node(g, store, &format!("{prefix}.wo"))?;
    multi_head_masked_attention(g, q_in, kv_in, wq, wk, wv, wo, n_heads, mask)
}

fn ff_sublayer(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = bound.node(g, store, &format!("{prefix}.w1"))?;
    let b1 = bound.node(g, store, &format!("{prefix}.b1"))?;
    let w2 = bound.node(g, store, &format!("{prefix}.w2"))?;
    let b2 = bound.node(g, store, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

fn residual_norm(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    sub: NodeId,
) -> Result<NodeId> {
    let gain = bound.node(g, store, &format!("{prefix}.gain"))?;
    let bias = bound.node(g, store, &format!("{prefix}.bias"))?;
    let sum = g.add(x, sub)?;
    g.layer_norm(sum, gain, bias)
}

/// Run an encoder stack: per layer masked self-attention and feed-forward,
/// each with a post-norm residual.
pub fn encoder_forward(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    cfg: &StackConfig,
    mut x: NodeId,
    mask: &Rc<AttnMask>,
) -> Result<NodeId> {
    cfg.validate()?;
    if g.value(x).rows() == 0 {
        return Err(Error::Shape("encoder input has no tokens".into()));
    }
    for i in 0..cfg.n_layers {
        let attn = attention_sublayer(
            g,
            bound,
            store,
            &format!("{prefix}.{i}.attn"),
            x,
            x,
            cfg.n_heads,
            mask,
        )?;
        x = residual_norm(g, bound, store, &format!("{prefix}.{i}.ln1"), x, attn)?;
        let ff = ff_sublayer(g, bound, store, &format!("{prefix}.{i}.ff"), x)?;
        x = residual_norm(g, bound, store, &format!("{prefix}.{i}.ln2"), x, ff)?;
    }
    Ok(x)
}

/// Run a decoder stack: per layer masked self-attention, masked cross
/// attention over `enc_out`, and feed-forward, each with a post-norm
/// residual.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    cfg: &StackConfig,
    mut x: NodeId,
    enc_out: NodeId,
    self_mask: &Rc<AttnMask>,
    cross_mask: &Rc<AttnMask>,
) -> Result<NodeId> {
    cfg.validate()?;
    if g.value(x).rows() == 0 || g.value(enc_out).rows() == 0 {
        return Err(Error::Shape("decoder input has no tokens".into()));
    }
    for i in 0..cfg.n_layers {
        let sa = attention_sublayer(
            g,
            bound,
            store,
            &format!("{prefix}.{i}.self"),
            x,
            x,
            cfg.n_heads,
            self_mask,
        )?;
        x = residual_norm(g, bound, store, &format!("{prefix}.{i}.ln1"), x, sa)?;
        let ca = attention_sublayer(
            g,
            bound,
            store,
            &format!("{prefix}.{i}.cross"),
            x,
            enc_out,
            cfg.n_heads,
            cross_mask,
        )?;
        x = residual_norm(g, bound, store, &format!("{prefix}.{i}.ln2"), x, ca)?;
        let ff = ff_sublayer(g, bound, store, &format!("{prefix}.{i}.ff"), x)?;
        x = residual_norm(g, bound, store, &format!("{prefix}.{i}.ln3"), x, ff)?;
    }
    Ok(x)
}

/// Output head: per-token pixel values in (-1, 1) via `tanh(x W + b)`.
pub fn generate_patches(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = bound.node(g, store, &format!("{prefix}.w"))?;
    let b = bound.node(g, store, &format!("{prefix}.b"))?;
    let o = g.matmul(x, w)?;
    let o = g.add_row(o, b)?;
    Ok(g.tanh(o))
}
