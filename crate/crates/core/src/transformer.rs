//! External-attention transformer over the set of local descriptors.
//!
//! Each layer attends from the `N` input rows to a small learnable key
//! memory of `S` rows per head, so the cost is `O(N·S)` rather than
//! `O(N²)`. Values are a shared linear map of the keys. The residual is
//! the offset form `F_out = LBR(F_EA − F_in) + F_in`.

use crate::diff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{register_lbr, register_linear, Mode, Session};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flop tag carried by the attention-matrix work of every layer.
pub const ATTENTION_TAG: &str = "attention";

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Key-memory rows per layer; its length is the layer count.
    pub memory_sizes: Vec<usize>,
    pub out_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 2,
            memory_sizes: vec![256, 128, 128, 64, 64, 64],
            out_dim: 512,
        }
    }
}

impl TransformerConfig {
    pub fn layers(&self) -> usize {
        self.memory_sizes.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.memory_sizes.is_empty() || self.memory_sizes.contains(&0) {
            return Err(Error::Config("every layer needs a non-empty key memory".into()));
        }
        Ok(())
    }

    /// Keeps the first `k` layers, extending with the last memory size.
    pub fn with_layers(&self, k: usize) -> Self {
        let last = *self.memory_sizes.last().unwrap_or(&64);
        let memory_sizes = (0..k).map(|i| *self.memory_sizes.get(i).unwrap_or(&last)).collect();
        Self {
            memory_sizes,
            ..self.clone()
        }
    }
}

pub fn register_ea_layer<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, cfg: &TransformerConfig, memory: usize) {
    let (d, h, dh) = (cfg.d_model, cfg.heads, cfg.head_dim());
    register_linear(store, seed, &format!("{prefix}.q"), d, d, false);
    store.init_uniform(seed, &format!("{prefix}.kmem"), &[h, memory, dh], 1.0);
    register_linear(store, seed, &format!("{prefix}.phi"), dh, dh, true);
    register_lbr(store, seed, &format!("{prefix}.lbr"), d, d);
}

pub fn register_transformer<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: &TransformerConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    register_lbr(store, seed, "xfmr.head", d, d);
    for (l, &m) in cfg.memory_sizes.iter().enumerate() {
        register_ea_layer(store, seed, &format!("xfmr.layer{l}"), cfg, m);
    }
    register_lbr(store, seed, "xfmr.proj512", d * cfg.layers(), cfg.out_dim);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EaNodes {
    pub output: NodeId,
    /// One `N × S` attention matrix per head.
    pub attention: Vec<NodeId>,
}

pub fn ea_layer_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    f_in: NodeId,
    cfg: &TransformerConfig,
    prefix: &str,
) -> Result<EaNodes> {
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let q = sess.linear(f_in, &format!("{prefix}.q"))?;
    let kmem = sess.p(&format!("{prefix}.kmem"))?;
    let memory = sess.graph.shape(kmem)[1];
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(h);
    let mut attention = Vec::with_capacity(h);
    for i in 0..h {
        let q_i = sess.graph.narrow(q, 1, i * dh, dh)?;
        let k_i = sess.graph.narrow(kmem, 0, i, 1)?;
        let k_i = sess.graph.reshape(k_i, &[memory, dh])?;
        sess.graph.set_tag(Some(ATTENTION_TAG));
        let v_i = sess.linear(k_i, &format!("{prefix}.phi"))?;
        let k_t = sess.graph.transpose(k_i)?;
        let logits = sess.graph.matmul(q_i, k_t)?;
        let logits = sess.graph.scale(logits, scale)?;
        let a = sess.graph.softmax(logits, 1)?;
        heads.push(sess.graph.matmul(a, v_i)?);
        sess.graph.set_tag(None);
        attention.push(a);
    }
    let f_ea = sess.graph.concat(&heads, 1)?;
    let offset = sess.graph.sub(f_ea, f_in)?;
    let mapped = sess.lbr(offset, &format!("{prefix}.lbr"))?;
    let output = sess.graph.add(mapped, f_in)?;
    Ok(EaNodes { output, attention })
}

#[derive(Clone, Debug)]
pub struct TransformerNodes {
    pub output: NodeId,
    pub layers: Vec<EaNodes>,
}

pub fn transformer_forward<T: Scalar>(
    sess: &mut Session<'_, T>,
    x: NodeId,
    cfg: &TransformerConfig,
) -> Result<TransformerNodes> {
    let width = sess.graph.shape(x)[1];
    if width != cfg.d_model {
        return Err(Error::InvalidInput(format!(
            "transformer expects width {}, got {width}",
            cfg.d_model
        )));
    }
    let mut h = sess.lbr(x, "xfmr.head")?;
    let mut layers = Vec::with_capacity(cfg.layers());
    for l in 0..cfg.layers() {
        let out = ea_layer_forward(sess, h, cfg, &format!("xfmr.layer{l}"))?;
        h = out.output;
        layers.push(out);
    }
    let outs: Vec<NodeId> = layers.iter().map(|l| l.output).collect();
    let cat = sess.graph.concat(&outs, 1)?;
    let output = sess.lbr(cat, "xfmr.proj512")?;
    Ok(TransformerNodes { output, layers })
}

/// One external-attention layer applied to a feature matrix.
pub fn ea_layer<T: Scalar>(
    f_in: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &TransformerConfig,
    prefix: &str,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(params, mode);
    let x = sess.constant(f_in.clone());
    let out = ea_layer_forward(&mut sess, x, cfg, prefix)?;
    Ok(sess.graph.value(out.output).clone())
}

/// Full transformer applied to a feature matrix.
pub fn transformer<T: Scalar>(
    locals: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &TransformerConfig,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut sess = Session::new(params, mode);
    let x = sess.constant(locals.clone());
    let out = transformer_forward(&mut sess, x, cfg)?;
    Ok(sess.graph.value(out.output).clone())
}

/// Plain scaled dot-product self-attention `softmax(QKᵀ/√d)·V` with
/// `Q = F·W_q`, `K = F·W_k`, `V = F·W_v`. Quadratic in the row count;
/// kept only as a cost reference.
pub fn self_attention_reference<T: Scalar>(
    f: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = crate::diff::Graph::new();
    let x = g.constant(f.clone());
    let (wq, wk, wv) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let d = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::of(1.0 / (d as f64).sqrt()))?;
    let a = g.softmax(logits, 1)?;
    let out = g.matmul(a, v)?;
    Ok(g.value(out).clone())
}
