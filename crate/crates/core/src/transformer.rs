//! Transformer blocks, the bar-wise encoder and the segment-conditioned
//! decoder.
//!
//! Every network exists in two forms that share one [`ParamStore`]: a
//! differentiable path that records onto a [`Graph`] for training, and a
//! cached incremental path ([`DecoderState`]) for generation and scoring.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::autodiff::{
    gemm, sigmoid, softmax_row, AutodiffError, Graph, Mask, NodeId, ParamId, ParamStore, Tensor,
    LAYER_NORM_EPS,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("bar spans do not partition the sequence: {0}")]
    BadPartition(String),
    #[error("pre-attention conditioning needs d_model = 2 * d_embed (got {d_model} vs {d_embed})")]
    ModeDimensionError { d_model: usize, d_embed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty bar")]
    EmptyBar,
    #[error("sequence of {len} tokens exceeds the {max} supported positions")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Unconditional,
    Memory,
    PreAttention,
    InAttention,
    PostAttention,
}

impl ConditioningMode {
    pub fn all() -> [ConditioningMode; 5] {
        [
            ConditioningMode::Unconditional,
            ConditioningMode::Memory,
            ConditioningMode::PreAttention,
            ConditioningMode::InAttention,
            ConditioningMode::PostAttention,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::Unconditional => "unconditional",
            ConditioningMode::Memory => "memory",
            ConditioningMode::PreAttention => "pre_attention",
            ConditioningMode::InAttention => "in_attention",
            ConditioningMode::PostAttention => "post_attention",
        }
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditioningMode::all()
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown conditioning mode {s:?}"))
    }
}

/// Sizes shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub d_ff: usize,
    pub d_cond: usize,
    pub d_z: usize,
    pub d_attr: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub max_bars: usize,
    pub mode: ConditioningMode,
    pub init_std: f64,
}

impl ModelConfig {
    /// A small configuration suitable for CPU training.
    pub fn tiny(vocab_size: usize, mode: ConditioningMode) -> Self {
        let d_model = 64;
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            d_model,
            d_embed: if mode == ConditioningMode::PreAttention { 32 } else { 64 },
            d_ff: 128,
            d_cond: 48,
            d_z: 16,
            d_attr: 16,
            vocab_size,
            max_len: 1280,
            max_bars: 512,
            mode,
            init_std: 0.01,
        }
    }

    /// Full-scale sizes (12 layers, d = 512, latent 128, attribute 64).
    pub fn reference(vocab_size: usize) -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 12,
            n_heads: 8,
            d_model: 512,
            d_embed: 512,
            d_ff: 2048,
            d_cond: 128 + 2 * 64,
            d_z: 128,
            d_attr: 64,
            vocab_size,
            max_len: 1280,
            max_bars: 512,
            mode: ConditioningMode::InAttention,
            init_std: 0.01,
        }
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.insert("model.enc_layers", self.enc_layers);
        kv.insert("model.dec_layers", self.dec_layers);
        kv.insert("model.n_heads", self.n_heads);
        kv.insert("model.d_model", self.d_model);
        kv.insert("model.d_embed", self.d_embed);
        kv.insert("model.d_ff", self.d_ff);
        kv.insert("model.d_cond", self.d_cond);
        kv.insert("model.d_z", self.d_z);
        kv.insert("model.d_attr", self.d_attr);
        kv.insert("model.vocab_size", self.vocab_size);
        kv.insert("model.max_len", self.max_len);
        kv.insert("model.max_bars", self.max_bars);
        kv.insert("model.mode", self.mode.name());
        kv.insert("model.init_std", self.init_std);
    }

    /// Overrides `base` with any `model.*` keys.
    pub fn from_kv(kv: &KeyValues, base: ModelConfig) -> Result<Self, ConfigError> {
        kv.check_known(
            "model.",
            &[
                "enc_layers", "dec_layers", "n_heads", "d_model", "d_embed", "d_ff", "d_cond", "d_z", "d_attr",
                "vocab_size", "max_len", "max_bars", "mode", "init_std",
            ],
        )?;
        let mut c = base;
        kv.set("model.enc_layers", &mut c.enc_layers)?;
        kv.set("model.dec_layers", &mut c.dec_layers)?;
        kv.set("model.n_heads", &mut c.n_heads)?;
        kv.set("model.d_model", &mut c.d_model)?;
        kv.set("model.d_embed", &mut c.d_embed)?;
        kv.set("model.d_ff", &mut c.d_ff)?;
        kv.set("model.d_cond", &mut c.d_cond)?;
        kv.set("model.d_z", &mut c.d_z)?;
        kv.set("model.d_attr", &mut c.d_attr)?;
        kv.set("model.vocab_size", &mut c.vocab_size)?;
        kv.set("model.max_len", &mut c.max_len)?;
        kv.set("model.max_bars", &mut c.max_bars)?;
        kv.set("model.mode", &mut c.mode)?;
        kv.set("model.init_std", &mut c.init_std)?;
        Ok(c)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.mode == ConditioningMode::PreAttention && self.d_model != 2 * self.d_embed {
            return Err(ModelError::ModeDimensionError {
                d_model: self.d_model,
                d_embed: self.d_embed,
            });
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(ModelError::Config("empty vocabulary or zero max_len".into()));
        }
        Ok(())
    }
}

fn weight<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
    store.add(name, Tensor::randn(&[rows, cols], std, rng))
}

fn constant(store: &mut ParamStore, name: String, cols: usize, value: f64) -> ParamId {
    store.add(name, Tensor::matrix(1, cols, vec![value; cols]))
}

/// Parameters of one self-attention layer (post-LN, ReLU feed-forward).
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl AttentionLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, f, s) = (cfg.d_model, cfg.d_ff, cfg.init_std);
        AttentionLayer {
            wq: weight(store, format!("{prefix}.wq"), d, d, s, rng),
            wk: weight(store, format!("{prefix}.wk"), d, d, s, rng),
            wv: weight(store, format!("{prefix}.wv"), d, d, s, rng),
            wo: weight(store, format!("{prefix}.wo"), d, d, s, rng),
            ln1_g: constant(store, format!("{prefix}.ln1.g"), d, 1.0),
            ln1_b: constant(store, format!("{prefix}.ln1.b"), d, 0.0),
            w1: weight(store, format!("{prefix}.ff.w1"), d, f, s, rng),
            b1: constant(store, format!("{prefix}.ff.b1"), f, 0.0),
            w2: weight(store, format!("{prefix}.ff.w2"), f, d, s, rng),
            b2: constant(store, format!("{prefix}.ff.b2"), d, 0.0),
            ln2_g: constant(store, format!("{prefix}.ln2.g"), d, 1.0),
            ln2_b: constant(store, format!("{prefix}.ln2.b"), d, 0.0),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| ModelError::Config(format!("missing parameter {prefix}.{n}")))
        };
        Ok(AttentionLayer {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            ln1_g: get("ln1.g")?,
            ln1_b: get("ln1.b")?,
            w1: get("ff.w1")?,
            b1: get("ff.b1")?,
            w2: get("ff.w2")?,
            b2: get("ff.b2")?,
            ln2_g: get("ln2.g")?,
            ln2_b: get("ln2.b")?,
        })
    }
}

/// Attention probability nodes recorded during a forward pass, one per
/// layer and head.
#[derive(Debug, Default, Clone)]
pub struct AttentionTrace {
    pub probs: Vec<Vec<NodeId>>,
}

/// Multi-head attention with residual and layer norm, then the
/// feed-forward sub-block with residual and layer norm.
///
/// `memory` rows, when given, are extra key/value positions placed before
/// the sequence; `mask` must then be `T x (M + T)`.
pub fn attention_block(
    g: &mut Graph<'_>,
    layer: &AttentionLayer,
    h: NodeId,
    memory: Option<NodeId>,
    mask: Option<&Rc<Mask>>,
    n_heads: usize,
    trace: Option<&mut AttentionTrace>,
) -> Result<NodeId, ModelError> {
    let d = g.value(h).cols();
    let dh = d / n_heads;
    let kv_src = match memory {
        Some(m) => g.concat_rows(&[m, h])?,
        None => h,
    };
    let (wq, wk, wv, wo) = (g.param(layer.wq), g.param(layer.wk), g.param(layer.wv), g.param(layer.wo));
    let q = g.matmul(h, wq)?;
    let k = g.matmul(kv_src, wk)?;
    let v = g.matmul(kv_src, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for m in 0..n_heads {
        let qh = g.split(q, m * dh, dh)?;
        let kh = g.split(k, m * dh, dh)?;
        let vh = g.split(v, m * dh, dh)?;
        let scores = g.matmul_ext(qh, kh, true)?;
        let scores = g.affine(scores, scale, 0.0);
        let p = g.softmax(scores, mask)?;
        probs.push(p);
        heads.push(g.matmul(p, vh)?);
    }
    if let Some(t) = trace {
        t.probs.push(probs);
    }
    let att = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
    let att = g.matmul(att, wo)?;
    let s = g.add(h, att)?;
    let (l1g, l1b) = (g.param(layer.ln1_g), g.param(layer.ln1_b));
    let s = g.layer_norm(s, l1g, l1b)?;
    let (w1, b1, w2, b2) = (g.param(layer.w1), g.param(layer.b1), g.param(layer.w2), g.param(layer.b2));
    let f = g.matmul(s, w1)?;
    let f = g.add(f, b1)?;
    let f = g.relu(f);
    let f = g.matmul(f, w2)?;
    let f = g.add(f, b2)?;
    let out = g.add(s, f)?;
    let (l2g, l2b) = (g.param(layer.ln2_g), g.param(layer.ln2_b));
    Ok(g.layer_norm(out, l2g, l2b)?)
}

/// The two single-hidden-layer PReLU networks used by post-attention
/// conditioning.
#[derive(Debug, Clone)]
pub struct PReluNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub alpha: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PReluNet {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        PReluNet {
            w1: weight(store, format!("{prefix}.w1"), d_in, hidden, std, rng),
            b1: constant(store, format!("{prefix}.b1"), hidden, 0.0),
            alpha: constant(store, format!("{prefix}.alpha"), hidden, 0.25),
            w2: weight(store, format!("{prefix}.w2"), hidden, d_out, std, rng),
            b2: constant(store, format!("{prefix}.b2"), d_out, 0.0),
        }
    }

    fn lookup(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| ModelError::Config(format!("missing parameter {prefix}.{n}")))
        };
        Ok(PReluNet {
            w1: get("w1")?,
            b1: get("b1")?,
            alpha: get("alpha")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId, ModelError> {
        let (w1, b1, a, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.alpha), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.prelu(h, a)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add(o, b2)?)
    }

    fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (w1, b1, a) = (store.get(self.w1), store.get(self.b1), store.get(self.alpha));
        let mut h = vec_mat(x, w1);
        for (j, v) in h.iter_mut().enumerate() {
            *v += b1.data()[j];
            if *v <= 0.0 {
                *v *= a.data()[j];
            }
        }
        let mut o = vec_mat(&h, store.get(self.w2));
        for (j, v) in o.iter_mut().enumerate() {
            *v += store.get(self.b2).data()[j];
        }
        o
    }
}

#[derive(Debug, Clone)]
pub enum Conditioner {
    None,
    /// `d_cond x (L * d)`: one memory state per layer.
    Memory { w_mem: ParamId },
    /// `d_cond x d_embed`, concatenated to token embeddings.
    Pre { w_pre: ParamId },
    /// `d_cond x d`, summed into every layer input but the output.
    In { w_in: ParamId },
    /// Conditioning net and gating net blended into the final states.
    Post { cond_net: PReluNet, gate_net: PReluNet },
}

/// Token-embedding front end plus a stack of attention layers.
#[derive(Debug, Clone)]
pub struct Stack {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    /// Projects `d_embed` to `d_model` when they differ (non-pre modes).
    pub emb_proj: Option<ParamId>,
    pub layers: Vec<AttentionLayer>,
}

impl Stack {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, n_layers: usize, pre: bool, rng: &mut R) -> Self {
        let s = cfg.init_std;
        let tok_emb = weight(store, format!("{prefix}.tok_emb"), cfg.vocab_size, cfg.d_embed, s, rng);
        let pos_emb = weight(store, format!("{prefix}.pos_emb"), cfg.max_len, cfg.d_embed, s, rng);
        let emb_proj = (!pre && cfg.d_embed != cfg.d_model)
            .then(|| weight(store, format!("{prefix}.emb_proj"), cfg.d_embed, cfg.d_model, s, rng));
        let layers = (0..n_layers)
            .map(|l| AttentionLayer::new(store, &format!("{prefix}.layer{l}"), cfg, rng))
            .collect();
        Stack {
            tok_emb,
            pos_emb,
            emb_proj,
            layers,
        }
    }

    fn lookup(store: &ParamStore, prefix: &str, n_layers: usize) -> Result<Self, ModelError> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| ModelError::Config(format!("missing parameter {prefix}.{n}")))
        };
        Ok(Stack {
            tok_emb: get("tok_emb")?,
            pos_emb: get("pos_emb")?,
            emb_proj: store.id(&format!("{prefix}.emb_proj")),
            layers: (0..n_layers)
                .map(|l| AttentionLayer::lookup(store, &format!("{prefix}.layer{l}")))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Token plus position embeddings (`T x d_embed`).
    fn embed(&self, g: &mut Graph<'_>, tokens: &[u32], positions: &[usize]) -> Result<NodeId, ModelError> {
        let vocab = g.params().get(self.tok_emb).rows();
        let max_len = g.params().get(self.pos_emb).rows();
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(ModelError::BadToken(t));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= max_len {
                return Err(ModelError::TooLong { len: p + 1, max: max_len });
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let te = g.param(self.tok_emb);
        let pe = g.param(self.pos_emb);
        let x = g.embedding(te, &ids)?;
        let p = g.embedding(pe, positions)?;
        Ok(g.add(x, p)?)
    }
}

/// Validates that `spans` are contiguous, non-empty and cover `0..len`.
pub fn check_partition(spans: &[std::ops::Range<usize>], len: usize) -> Result<(), ModelError> {
    let mut at = 0;
    for s in spans {
        if s.start != at || s.end <= s.start {
            return Err(ModelError::BadPartition(format!("span {s:?} after position {at}")));
        }
        at = s.end;
    }
    if at != len {
        return Err(ModelError::BadPartition(format!("spans end at {at}, sequence has {len}")));
    }
    Ok(())
}

fn bar_index_of(spans: &[std::ops::Range<usize>], len: usize) -> Vec<usize> {
    let mut idx = vec![0; len];
    for (k, s) in spans.iter().enumerate() {
        for i in s.clone() {
            idx[i] = k;
        }
    }
    idx
}

/// Causal decoder with one of the segment-level conditioning mechanisms.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub mode: ConditioningMode,
    pub n_heads: usize,
    pub d_model: usize,
    pub stack: Stack,
    pub cond: Conditioner,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let pre = cfg.mode == ConditioningMode::PreAttention;
        let stack = Stack::new(store, prefix, cfg, cfg.dec_layers, pre, rng);
        let (d, dc, s) = (cfg.d_model, cfg.d_cond, cfg.init_std);
        let cond = match cfg.mode {
            ConditioningMode::Unconditional => Conditioner::None,
            ConditioningMode::Memory => Conditioner::Memory {
                w_mem: weight(store, format!("{prefix}.w_mem"), dc, cfg.dec_layers * d, s, rng),
            },
            ConditioningMode::PreAttention => Conditioner::Pre {
                w_pre: weight(store, format!("{prefix}.w_pre"), dc, cfg.d_embed, s, rng),
            },
            ConditioningMode::InAttention => Conditioner::In {
                w_in: weight(store, format!("{prefix}.w_in"), dc, d, s, rng),
            },
            ConditioningMode::PostAttention => Conditioner::Post {
                cond_net: PReluNet::new(store, &format!("{prefix}.post_cond"), dc, d, d, s, rng),
                gate_net: PReluNet::new(store, &format!("{prefix}.post_gate"), d + dc, d, 1, s, rng),
            },
        };
        Ok(Decoder {
            mode: cfg.mode,
            n_heads: cfg.n_heads,
            d_model: d,
            stack,
            cond,
            out_w: weight(store, format!("{prefix}.out_w"), d, cfg.vocab_size, s, rng),
            out_b: constant(store, format!("{prefix}.out_b"), cfg.vocab_size, 0.0),
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| ModelError::Config(format!("missing parameter {prefix}.{n}")))
        };
        let cond = match cfg.mode {
            ConditioningMode::Unconditional => Conditioner::None,
            ConditioningMode::Memory => Conditioner::Memory { w_mem: get("w_mem")? },
            ConditioningMode::PreAttention => Conditioner::Pre { w_pre: get("w_pre")? },
            ConditioningMode::InAttention => Conditioner::In { w_in: get("w_in")? },
            ConditioningMode::PostAttention => Conditioner::Post {
                cond_net: PReluNet::lookup(store, &format!("{prefix}.post_cond"))?,
                gate_net: PReluNet::lookup(store, &format!("{prefix}.post_gate"))?,
            },
        };
        Ok(Decoder {
            mode: cfg.mode,
            n_heads: cfg.n_heads,
            d_model: cfg.d_model,
            stack: Stack::lookup(store, prefix, cfg.dec_layers)?,
            cond,
            out_w: get("out_w")?,
            out_b: get("out_b")?,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.stack.layers.len()
    }

    /// Differentiable forward pass returning `T x vocab` logits.
    ///
    /// `conditions` is a `K x d_cond` node (ignored by the unconditional
    /// decoder) and `bar_spans` assigns every position to one bar.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        conditions: Option<NodeId>,
        bar_spans: &[std::ops::Range<usize>],
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<NodeId, ModelError> {
        let t_len = tokens.len();
        check_partition(bar_spans, t_len)?;
        let bar_idx = bar_index_of(bar_spans, t_len);
        let positions: Vec<usize> = (0..t_len).collect();
        let cond = match (&self.cond, conditions) {
            (Conditioner::None, _) => None,
            (_, Some(c)) => {
                if g.value(c).rows() != bar_spans.len() {
                    return Err(ModelError::BadPartition(format!(
                        "{} conditions for {} bars",
                        g.value(c).rows(),
                        bar_spans.len()
                    )));
                }
                Some(c)
            }
            (_, None) => return Err(ModelError::Config("conditional decoder needs conditions".into())),
        };

        let x = self.stack.embed(g, tokens, &positions)?;
        let mut h = match (&self.cond, cond) {
            (Conditioner::Pre { w_pre }, Some(c)) => {
                let w = g.param(*w_pre);
                let e = g.matmul(c, w)?;
                let e = g.embedding(e, &bar_idx)?;
                g.concat(&[x, e])?
            }
            _ => match self.stack.emb_proj {
                Some(p) => {
                    let w = g.param(p);
                    g.matmul(x, w)?
                }
                None => x,
            },
        };

        let n_layers = self.stack.layers.len();
        let (memory, mask) = match (&self.cond, cond) {
            (Conditioner::Memory { w_mem }, Some(c)) => {
                let w = g.param(*w_mem);
                let m = g.matmul(c, w)?;
                let k = bar_spans.len();
                (Some(m), Rc::new(Mask::causal_with_prefix(t_len, k)))
            }
            _ => (None, Rc::new(Mask::causal(t_len))),
        };
        let in_cond = match (&self.cond, cond) {
            (Conditioner::In { w_in }, Some(c)) => {
                let w = g.param(*w_in);
                let e = g.matmul(c, w)?;
                Some(g.embedding(e, &bar_idx)?)
            }
            _ => None,
        };

        for (l, layer) in self.stack.layers.iter().enumerate() {
            if let Some(e) = in_cond {
                h = g.add(h, e)?;
            }
            let mem_l = match memory {
                Some(m) => Some(g.split(m, l * self.d_model, self.d_model)?),
                None => None,
            };
            h = attention_block(g, layer, h, mem_l, Some(&mask), self.n_heads, trace.as_deref_mut())?;
        }
        debug_assert_eq!(n_layers, self.stack.layers.len());

        if let (Conditioner::Post { cond_net, gate_net }, Some(c)) = (&self.cond, cond) {
            let e = cond_net.forward(g, c)?;
            let e = g.embedding(e, &bar_idx)?;
            let c_t = g.embedding(c, &bar_idx)?;
            let gate_in = g.concat(&[h, c_t])?;
            let gate = gate_net.forward(g, gate_in)?;
            let alpha = g.sigmoid(gate);
            let keep = g.affine(alpha, -1.0, 1.0);
            let a = g.mul(h, keep)?;
            let b = g.mul(e, alpha)?;
            h = g.add(a, b)?;
        }

        let (ow, ob) = (g.param(self.out_w), g.param(self.out_b));
        let logits = g.matmul(h, ow)?;
        Ok(g.add(logits, ob)?)
    }

    /// Starts an incremental decoding session.
    ///
    /// `conditions` holds one `d_cond` row per bar the session may reach.
    pub fn start<'a>(&'a self, store: &'a ParamStore, conditions: Vec<Vec<f64>>) -> DecoderState<'a> {
        DecoderState::new(self, store, conditions)
    }
}

/// Bidirectional encoder that summarises each bar by the state above its
/// first (Bar) token.
#[derive(Debug, Clone)]
pub struct BarEncoder {
    pub n_heads: usize,
    pub stack: Stack,
}

impl BarEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut enc_cfg = cfg.clone();
        enc_cfg.d_embed = cfg.d_model;
        Ok(BarEncoder {
            n_heads: cfg.n_heads,
            stack: Stack::new(store, prefix, &enc_cfg, cfg.enc_layers, false, rng),
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(BarEncoder {
            n_heads: cfg.n_heads,
            stack: Stack::lookup(store, prefix, cfg.enc_layers)?,
        })
    }

    /// Encodes every bar of a sequence in one pass with a block-diagonal
    /// mask; positions restart at each bar. Returns a `K x d` node.
    pub fn encode_bars(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        bar_spans: &[std::ops::Range<usize>],
    ) -> Result<NodeId, ModelError> {
        check_partition(bar_spans, tokens.len())?;
        let mut positions = vec![0; tokens.len()];
        let mut allowed = vec![false; tokens.len() * tokens.len()];
        let t_len = tokens.len();
        for s in bar_spans {
            for i in s.clone() {
                positions[i] = i - s.start;
                for j in s.clone() {
                    allowed[i * t_len + j] = true;
                }
            }
        }
        let mask = Rc::new(Mask::from_allowed(t_len, t_len, allowed));
        let mut h = self.stack.embed(g, tokens, &positions)?;
        if let Some(p) = self.stack.emb_proj {
            let w = g.param(p);
            h = g.matmul(h, w)?;
        }
        for layer in &self.stack.layers {
            h = attention_block(g, layer, h, None, Some(&mask), self.n_heads, None)?;
        }
        let firsts: Vec<usize> = bar_spans.iter().map(|s| s.start).collect();
        Ok(g.embedding(h, &firsts)?)
    }

    /// Encodes one bar; returns the `d`-dimensional state above its first token.
    pub fn encode_bar(&self, store: &ParamStore, bar: &[u32]) -> Result<Vec<f64>, ModelError> {
        if bar.is_empty() {
            return Err(ModelError::EmptyBar);
        }
        let mut g = Graph::new(store);
        let out = self.encode_bars(&mut g, bar, &[0..bar.len()])?;
        Ok(g.value(out).data().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Incremental inference

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    gemm(1, k, n, x, k as isize, 1, w.data(), n as isize, 1, &mut out, 0.0);
    out
}

fn layer_norm_vec(x: &mut [f64], gamma: &Tensor, beta: &Tensor) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (c, v) in x.iter_mut().enumerate() {
        *v = gamma.data()[c] * ((*v - mean) * is) + beta.data()[c];
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Rows of keys and values seen so far (memory rows first).
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Key/value-cached decoding session over a [`Decoder`].
#[derive(Clone)]
pub struct DecoderState<'a> {
    decoder: &'a Decoder,
    store: &'a ParamStore,
    conditions: Vec<Vec<f64>>,
    /// Per-bar projected conditions (pre: d_embed, in: d, post: d).
    projected: Vec<Vec<f64>>,
    caches: Vec<LayerCache>,
    position: usize,
    /// Hidden states of every layer for the latest step (index 0 = input).
    last_hidden: Vec<Vec<f64>>,
}

impl<'a> DecoderState<'a> {
    fn new(decoder: &'a Decoder, store: &'a ParamStore, conditions: Vec<Vec<f64>>) -> Self {
        let d = decoder.d_model;
        let n_layers = decoder.n_layers();
        let mut caches = vec![
            LayerCache {
                keys: Vec::new(),
                values: Vec::new(),
            };
            n_layers
        ];
        let projected = match &decoder.cond {
            Conditioner::None | Conditioner::Memory { .. } => Vec::new(),
            Conditioner::Pre { w_pre } => conditions.iter().map(|c| vec_mat(c, store.get(*w_pre))).collect(),
            Conditioner::In { w_in } => conditions.iter().map(|c| vec_mat(c, store.get(*w_in))).collect(),
            Conditioner::Post { cond_net, .. } => conditions.iter().map(|c| cond_net.apply(store, c)).collect(),
        };
        if let Conditioner::Memory { w_mem } = &decoder.cond {
            for c in &conditions {
                let m = vec_mat(c, store.get(*w_mem));
                for (l, layer) in decoder.stack.layers.iter().enumerate() {
                    let row = &m[l * d..(l + 1) * d];
                    caches[l].keys.extend(vec_mat(row, store.get(layer.wk)));
                    caches[l].values.extend(vec_mat(row, store.get(layer.wv)));
                }
            }
        }
        DecoderState {
            decoder,
            store,
            conditions,
            projected,
            caches,
            position: 0,
            last_hidden: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Number of positions the decoder has embeddings for.
    pub fn max_len(&self) -> usize {
        self.store.get(self.decoder.stack.pos_emb).rows()
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    /// Hidden state after `layer` attention layers for the latest step.
    pub fn hidden(&self, layer: usize) -> &[f64] {
        &self.last_hidden[layer]
    }

    /// Feeds one token belonging to bar `bar` and returns the logits for
    /// the next position.
    pub fn step(&mut self, token: u32, bar: usize) -> Result<Vec<f64>, ModelError> {
        let dec = self.decoder;
        let store = self.store;
        let d = dec.d_model;
        let n_heads = dec.n_heads;
        let dh = d / n_heads;
        let tok_emb = store.get(dec.stack.tok_emb);
        let pos_emb = store.get(dec.stack.pos_emb);
        if token as usize >= tok_emb.rows() {
            return Err(ModelError::BadToken(token));
        }
        if self.position >= pos_emb.rows() {
            return Err(ModelError::TooLong {
                len: self.position + 1,
                max: pos_emb.rows(),
            });
        }
        if !matches!(dec.cond, Conditioner::None) && bar >= self.conditions.len() {
            return Err(ModelError::BadPartition(format!(
                "bar {bar} but only {} conditions",
                self.conditions.len()
            )));
        }
        let x: Vec<f64> = tok_emb
            .row(token as usize)
            .iter()
            .zip(pos_emb.row(self.position))
            .map(|(a, b)| a + b)
            .collect();
        let mut h = match &dec.cond {
            Conditioner::Pre { .. } => {
                let mut v = x;
                v.extend_from_slice(&self.projected[bar]);
                v
            }
            _ => match dec.stack.emb_proj {
                Some(p) => vec_mat(&x, store.get(p)),
                None => x,
            },
        };
        self.last_hidden.clear();
        self.last_hidden.push(h.clone());
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, layer) in dec.stack.layers.iter().enumerate() {
            if let Conditioner::In { .. } = dec.cond {
                for (v, e) in h.iter_mut().zip(&self.projected[bar]) {
                    *v += e;
                }
            }
            let q = vec_mat(&h, store.get(layer.wq));
            let cache = &mut self.caches[l];
            cache.keys.extend(vec_mat(&h, store.get(layer.wk)));
            cache.values.extend(vec_mat(&h, store.get(layer.wv)));
            let n_pos = cache.keys.len() / d;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n_pos];
            for m in 0..n_heads {
                let qh = &q[m * dh..(m + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &cache.keys[j * d + m * dh..j * d + (m + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_row(&mut scores, None);
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &cache.values[j * d + m * dh..j * d + (m + 1) * dh];
                    for c in 0..dh {
                        att[m * dh + c] += p * vh[c];
                    }
                }
            }
            let att = vec_mat(&att, store.get(layer.wo));
            let mut s: Vec<f64> = h.iter().zip(&att).map(|(a, b)| a + b).collect();
            layer_norm_vec(&mut s, store.get(layer.ln1_g), store.get(layer.ln1_b));
            let mut f = vec_mat(&s, store.get(layer.w1));
            for (j, v) in f.iter_mut().enumerate() {
                *v = (*v + store.get(layer.b1).data()[j]).max(0.0);
            }
            let f = vec_mat(&f, store.get(layer.w2));
            let b2 = store.get(layer.b2).data();
            h = s.iter().zip(&f).enumerate().map(|(j, (a, b))| a + b + b2[j]).collect();
            layer_norm_vec(&mut h, store.get(layer.ln2_g), store.get(layer.ln2_b));
            self.last_hidden.push(h.clone());
        }
        if let Conditioner::Post { gate_net, .. } = &dec.cond {
            let mut gate_in = h.clone();
            gate_in.extend_from_slice(&self.conditions[bar]);
            let alpha = sigmoid(gate_net.apply(store, &gate_in)[0]);
            let e = &self.projected[bar];
            h = h
                .iter()
                .zip(e)
                .map(|(hv, ev)| hv * (1.0 - alpha) + ev * alpha)
                .collect();
        }
        let mut logits = vec_mat(&h, store.get(dec.out_w));
        for (v, b) in logits.iter_mut().zip(store.get(dec.out_b).data()) {
            *v += b;
        }
        self.position += 1;
        Ok(logits)
    }
}

/// Mean of the hidden states after `layer` attention layers of a causal
/// language model run over one bar.
pub fn extract_bar_embedding(
    lm: &Decoder,
    store: &ParamStore,
    bar: &[u32],
    layer: usize,
) -> Result<Vec<f64>, ModelError> {
    if bar.is_empty() {
        return Err(ModelError::EmptyBar);
    }
    if layer > lm.n_layers() {
        return Err(ModelError::Config(format!(
            "layer {layer} of a {}-layer model",
            lm.n_layers()
        )));
    }
    let mut state = lm.start(store, Vec::new());
    let mut pooled = vec![0.0; lm.d_model];
    for &t in bar {
        state.step(t, 0)?;
        for (p, v) in pooled.iter_mut().zip(state.hidden(layer)) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= bar.len() as f64;
    }
    Ok(pooled)
}
