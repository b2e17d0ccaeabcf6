//! Decoder-only toy language model with an adaptor front-end.
//!
//! Token prompts enter through the embedding table. Feature prompts enter
//! through a two-layer adaptor that maps each feature vector into the
//! embedding space; response tokens are always embedded. A text-only forward
//! never touches the adaptor parameters.

pub mod checkpoint;
mod lora;

pub use lora::{LoraAdapter, MergeStatus, DEFAULT_LORA_TARGETS};
pub use checkpoint::{Container, ContainerKind};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ModalBatch, PromptInput};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-10;

/// Matrices of one transformer block, in registry order.
pub const BLOCK_MATRICES: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            max_seq: 16,
            feature_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut shapes = vec![
            ("embedding".to_string(), vec![v, d]),
            ("position".to_string(), vec![self.max_seq, d]),
        ];
        for i in 0..self.n_layers {
            let p = |m: &str| format!("layer.{i}.{m}");
            shapes.push((p("attn_norm"), vec![d]));
            for m in ["wq", "wk", "wv", "wo"] {
                shapes.push((p(m), vec![d, d]));
            }
            shapes.push((p("mlp_norm"), vec![d]));
            shapes.push((p("w_gate"), vec![d, f]));
            shapes.push((p("w_up"), vec![d, f]));
            shapes.push((p("w_down"), vec![f, d]));
        }
        shapes.push(("final_norm".to_string(), vec![d]));
        shapes.push(("lm_head".to_string(), vec![d, v]));
        shapes.push(("adaptor.0".to_string(), vec![self.feature_dim, d]));
        shapes.push(("adaptor.1".to_string(), vec![d, d]));
        shapes
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Coarse grouping of registry entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Layer(usize),
    Embedding,
    Position,
    FinalNorm,
    Head,
    Adaptor,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if let Some(rest) = name.strip_prefix("layer.") {
            let idx = rest.split('.').next()?.parse().ok()?;
            return Some(ParamGroup::Layer(idx));
        }
        match name {
            "embedding" => Some(ParamGroup::Embedding),
            "position" => Some(ParamGroup::Position),
            "final_norm" => Some(ParamGroup::FinalNorm),
            "lm_head" => Some(ParamGroup::Head),
            _ if name.starts_with("adaptor.") => Some(ParamGroup::Adaptor),
            _ => None,
        }
    }
}

/// Which leaves of a forward pass track gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// Trainable parameters only (base and adapters).
    Trainable,
    /// Every base parameter, regardless of trainability; adapters excluded.
    AllBase,
}

/// A recorded forward pass and the leaves it created.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    base: Vec<Option<Var>>,
    adapters: Vec<(Var, Var)>,
}

impl ForwardPass {
    /// Leaf of base parameter `index`, if the forward read it.
    pub fn param_var(&self, index: usize) -> Option<Var> {
        self.base[index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLM {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
    adapters: Vec<LoraAdapter>,
}

impl TransformerLM {
    /// Deterministic initialization from `cfg.seed`: scaled-normal matrices,
    /// unit norm gains.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with("norm") {
                Tensor::ones(&shape)
            } else {
                let std = match name.as_str() {
                    "embedding" => 1.0,
                    "position" => 0.5,
                    _ => {
                        let base = 1.0 / (shape[0] as f64).sqrt();
                        if name.ends_with(".wo") || name.ends_with(".w_down") {
                            base * resid_scale
                        } else {
                            base
                        }
                    }
                };
                Tensor::randn(&shape, std, &mut rng)
            };
            names.push(name);
            params.push(t);
        }
        Self::from_parts(cfg.clone(), names, params)
    }

    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != names.len()
            || expected
                .iter()
                .zip(names.iter().zip(&params))
                .any(|((en, es), (n, p))| en != n || es.as_slice() != p.shape())
        {
            return Err(Error::Integrity("parameter registry does not match the model config".into()));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let trainable = vec![true; names.len()];
        Ok(Self {
            config,
            names,
            params,
            trainable,
            index,
            adapters: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Canonical parameter names, in registry order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    /// Marks exactly the base parameters whose names satisfy `keep` as
    /// trainable; returns how many are.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) -> usize {
        for (t, name) in self.trainable.iter_mut().zip(&self.names) {
            *t = keep(name);
        }
        self.trainable.iter().filter(|&&t| t).count()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn num_trainable(&self) -> usize {
        let base: usize = self
            .params
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.numel())
            .sum();
        base + self.adapters.iter().map(|a| a.a.numel() + a.b.numel()).sum::<usize>()
    }

    /// Mutable handles to every trainable tensor: base parameters in registry
    /// order, then each adapter's `A` and `B`.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for ((name, p), &t) in self.names.iter().zip(self.params.iter_mut()).zip(&self.trainable) {
            if t {
                out.push((name.clone(), p));
            }
        }
        for ad in &mut self.adapters {
            out.push((format!("lora.{}.a", ad.target), &mut ad.a));
            out.push((format!("lora.{}.b", ad.target), &mut ad.b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
        for ad in &mut self.adapters {
            ad.a.zero_grad();
            ad.b.zero_grad();
        }
    }

    /// Bitwise equality of every base parameter.
    pub fn same_weights(&self, other: &Self) -> bool {
        self.names == other.names && self.params.iter().zip(&other.params).all(|(a, b)| a.data() == b.data())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq {
            return Err(Error::Length {
                len,
                max: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// Records a forward pass. Logits are `[B, prompt_len + response_len, vocab]`.
    pub fn forward(&self, batch: &ModalBatch, mode: GradMode) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (b, t, d) = (batch.batch_size(), batch.seq_len(), cfg.d_model);
        self.check_len(t)?;
        let mut g = Graph::new();
        let mut base: Vec<Option<Var>> = vec![None; self.params.len()];

        let leaf = |g: &mut Graph, base: &mut Vec<Option<Var>>, name: &str| -> Var {
            let i = self.index[name];
            if let Some(v) = base[i] {
                return v;
            }
            let track = match mode {
                GradMode::None => false,
                GradMode::Trainable => self.trainable[i],
                GradMode::AllBase => true,
            };
            let v = g.leaf(self.params[i].clone().with_requires_grad(track));
            base[i] = Some(v);
            v
        };
        let track_adapters = mode == GradMode::Trainable;
        let adapters: Vec<(Var, Var)> = self
            .adapters
            .iter()
            .map(|a| {
                (
                    g.leaf(a.a.clone().with_requires_grad(track_adapters)),
                    g.leaf(a.b.clone().with_requires_grad(track_adapters)),
                )
            })
            .collect();
        let adapter_of: HashMap<&str, usize> =
            self.adapters.iter().enumerate().map(|(i, a)| (a.target.as_str(), i)).collect();

        let emb = leaf(&mut g, &mut base, "embedding");
        let x = match batch.prompt() {
            PromptInput::Tokens(prompt) => {
                let s = batch.prompt_len();
                let mut ids = Vec::with_capacity(b * t);
                for row in 0..b {
                    ids.extend_from_slice(&prompt[row * s..(row + 1) * s]);
                    ids.extend_from_slice(batch.response_row(row));
                }
                let e = g.embedding(emb, &ids)?;
                g.reshape(e, &[b, t, d])?
            }
            PromptInput::Features { data, dim } => {
                let s = batch.prompt_len();
                if *dim != cfg.feature_dim {
                    return Err(Error::shape("adaptor input", &[*dim], &[cfg.feature_dim]));
                }
                let feats = g.constant(Tensor::new(&[b * s, *dim], data.clone())?);
                let w0 = leaf(&mut g, &mut base, "adaptor.0");
                let w1 = leaf(&mut g, &mut base, "adaptor.1");
                let h = g.matmul(feats, w0)?;
                let h = g.silu(h);
                let h = g.matmul(h, w1)?;
                let h = g.reshape(h, &[b, s, d])?;
                if batch.response_len() == 0 {
                    h
                } else {
                    let e = g.embedding(emb, batch.response())?;
                    let e = g.reshape(e, &[b, batch.response_len(), d])?;
                    g.concat_seq(h, e)?
                }
            }
        };
        let pos_table = leaf(&mut g, &mut base, "position");
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[b * t, d])?;

        let (h, dh) = (cfg.n_heads, d / cfg.n_heads);
        for layer in 0..cfg.n_layers {
            let p = |m: &str| format!("layer.{layer}.{m}");
            let linear = |g: &mut Graph, base: &mut Vec<Option<Var>>, input: Var, m: &str| -> Result<Var> {
                let name = p(m);
                let w = leaf(g, base, &name);
                let y = g.matmul(input, w)?;
                match adapter_of.get(name.as_str()) {
                    Some(&ai) => {
                        let (a, bm) = adapters[ai];
                        let at = g.transpose(a)?;
                        let xa = g.matmul(input, at)?;
                        let bt = g.transpose(bm)?;
                        let delta = g.matmul(xa, bt)?;
                        let delta = g.scale(delta, self.adapters[ai].scale());
                        g.add(y, delta)
                    }
                    None => Ok(y),
                }
            };

            let gain = leaf(&mut g, &mut base, &p("attn_norm"));
            let n = g.rmsnorm(x, NORM_EPS);
            let n = g.mul(n, gain)?;
            let heads = |g: &mut Graph, base: &mut Vec<Option<Var>>, m: &str| -> Result<Var> {
                let y = linear(g, base, n, m)?;
                let y = g.reshape(y, &[b, t, h, dh])?;
                let y = g.swap_axes12(y)?;
                g.reshape(y, &[b * h, t, dh])
            };
            let q = heads(&mut g, &mut base, "wq")?;
            let k = heads(&mut g, &mut base, "wk")?;
            let v = heads(&mut g, &mut base, "wv")?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.causal_mask(scores)?;
            let attn = g.softmax(scores);
            let ctx = g.bmm(attn, v, false)?;
            let ctx = g.reshape(ctx, &[b, h, t, dh])?;
            let ctx = g.swap_axes12(ctx)?;
            let ctx = g.reshape(ctx, &[b * t, d])?;
            let o = linear(&mut g, &mut base, ctx, "wo")?;
            x = g.add(x, o)?;

            let gain = leaf(&mut g, &mut base, &p("mlp_norm"));
            let n = g.rmsnorm(x, NORM_EPS);
            let n = g.mul(n, gain)?;
            let gate = linear(&mut g, &mut base, n, "w_gate")?;
            let up = linear(&mut g, &mut base, n, "w_up")?;
            let act = g.silu(gate);
            let act = g.mul(act, up)?;
            let down = linear(&mut g, &mut base, act, "w_down")?;
            x = g.add(x, down)?;
        }
        let gain = leaf(&mut g, &mut base, "final_norm");
        let n = g.rmsnorm(x, NORM_EPS);
        let n = g.mul(n, gain)?;
        let head = leaf(&mut g, &mut base, "lm_head");
        let logits = g.matmul(n, head)?;
        let logits = g.reshape(logits, &[b, t, cfg.vocab_size])?;
        Ok(ForwardPass {
            graph: g,
            logits,
            base,
            adapters,
        })
    }

    /// Gradient-free logits.
    pub fn logits(&self, batch: &ModalBatch) -> Result<Tensor> {
        let fp = self.forward(batch, GradMode::None)?;
        Ok(fp.graph.value(fp.logits).clone())
    }

    /// Mean response cross-entropy of a batch, without gradients.
    pub fn loss(&self, batch: &ModalBatch) -> Result<f64> {
        let mut fp = self.forward(batch, GradMode::None)?;
        let (targets, mask) = batch.targets_and_mask();
        let l = fp.graph.cross_entropy(fp.logits, &targets, &mask)?;
        Ok(fp.graph.value(l).data()[0])
    }

    /// Forward + backward on one batch; gradients are accumulated into the
    /// parameter (and adapter) tensors selected by `mode`. Returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &ModalBatch, mode: GradMode) -> Result<f64> {
        let mut fp = self.forward(batch, mode)?;
        let (targets, mask) = batch.targets_and_mask();
        let l = fp.graph.cross_entropy(fp.logits, &targets, &mask)?;
        let loss = fp.graph.value(l).data()[0];
        fp.graph.backward(l)?;
        for (i, var) in fp.base.iter().enumerate() {
            if let Some(g) = var.and_then(|v| fp.graph.grad(v)) {
                self.params[i].accumulate_grad(g)?;
            }
        }
        for (ad, &(a, b)) in self.adapters.iter_mut().zip(&fp.adapters) {
            if let Some(g) = fp.graph.grad(a) {
                ad.a.accumulate_grad(g)?;
            }
            if let Some(g) = fp.graph.grad(b) {
                ad.b.accumulate_grad(g)?;
            }
        }
        Ok(loss)
    }

    /// Greedy argmax decoding, one row per prompt. Each row stops after
    /// emitting `eos` (included in the output) or after `max_new` tokens.
    pub fn generate_greedy(&self, prompt: &ModalBatch, max_new: usize, eos: usize) -> Result<Vec<Vec<usize>>> {
        self.check_len(prompt.prompt_len() + max_new)?;
        let b = prompt.batch_size();
        let v = self.config.vocab_size;
        let mut generated: Vec<Vec<usize>> = vec![Vec::with_capacity(max_new); b];
        let mut done = vec![false; b];
        let mut block: Vec<usize> = Vec::with_capacity(b * max_new);
        for step in 0..max_new {
            let batch = prompt.with_response(block.clone(), step)?;
            let logits = self.logits(&batch)?;
            let t = batch.seq_len();
            let mut next = Vec::with_capacity(b);
            for row in 0..b {
                let off = (row * t + t - 1) * v;
                let tok = argmax(&logits.data()[off..off + v]);
                next.push(tok);
                if !done[row] {
                    generated[row].push(tok);
                    done[row] = tok == eos;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            // rebuild the response block row-major with the new column
            let mut grown = Vec::with_capacity(b * (step + 1));
            for (row, tok) in next.iter().enumerate() {
                grown.extend_from_slice(&block[row * step..(row + 1) * step]);
                grown.push(*tok);
            }
            block = grown;
        }
        Ok(generated)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
