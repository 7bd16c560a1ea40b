//! The tiny visual language model: a two-layer mapping network that turns an
//! image embedding into a visual prefix, followed by a pre-norm causal
//! transformer decoder whose output head is tied to the token embeddings.

mod checkpoint;
mod decode;
mod forward;
pub mod kernels;
mod optim;

use std::ops::Range;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, TokenId};

pub use checkpoint::{CKP_MAGIC, CKP_VERSION};
pub use decode::{
    beam_search, greedy_rollout, Constraint, DecodeConfig, LanguageModel, DEFAULT_BEAM_WIDTH, DEFAULT_MAX_NEW,
};
pub use forward::{backward, forward_loss, forward_with_logits, ForwardTrace};
pub use kernels::Scalar;
pub use optim::{AdamW, AdamWConfig};

pub const DEFAULT_PREFIX_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub prefix_len: usize,
    pub embed_dim: usize,
    pub map_hidden: usize,
    pub max_len: usize,
    pub init_std: f64,
    /// Mapping-net weights are drawn with std `map_gain / sqrt(fan_in)`.
    pub map_gain: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given input embedding width.
    pub fn desk(embed_dim: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            prefix_len: DEFAULT_PREFIX_LEN,
            embed_dim,
            map_hidden: 128,
            max_len: 160,
            init_std: 0.5,
            map_gain: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.prefix_len == 0 || self.map_hidden == 0 {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim must be >= 2"));
        }
        if self.max_len < self.prefix_len + 2 {
            return Err(Error::config("max_len too small for one image"));
        }
        if !(self.init_std > 0.0 && self.map_gain > 0.0) {
            return Err(Error::config("init_std and map_gain must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Linear maps get weight decay; embeddings, biases and norms do not.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2 && !self.name.ends_with("emb")
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wqkv: usize,
    pub bqkv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) head_bias: usize,
    pub(crate) map_w1: usize,
    pub(crate) map_b1: usize,
    pub(crate) map_w2: usize,
    pub(crate) map_b2: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let off = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset: off,
            });
            off
        };
        let d = cfg.d_model;
        let tok_emb = push("tok_emb".into(), vec![vocab, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_len, d]);
        let head_bias = push("head.bias".into(), vec![vocab]);
        let map_w1 = push("map.w1".into(), vec![cfg.embed_dim, cfg.map_hidden]);
        let map_b1 = push("map.b1".into(), vec![cfg.map_hidden]);
        let map_w2 = push("map.w2".into(), vec![cfg.map_hidden, cfg.prefix_len * d]);
        let map_b2 = push("map.b2".into(), vec![cfg.prefix_len * d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blk{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: push(p("ln1.g"), vec![d]),
                ln1_b: push(p("ln1.b"), vec![d]),
                wqkv: push(p("attn.wqkv"), vec![d, 3 * d]),
                bqkv: push(p("attn.bqkv"), vec![3 * d]),
                wo: push(p("attn.wo"), vec![d, d]),
                bo: push(p("attn.bo"), vec![d]),
                ln2_g: push(p("ln2.g"), vec![d]),
                ln2_b: push(p("ln2.b"), vec![d]),
                ff_w1: push(p("ff.w1"), vec![d, cfg.d_ff]),
                ff_b1: push(p("ff.b1"), vec![cfg.d_ff]),
                ff_w2: push(p("ff.w2"), vec![cfg.d_ff, d]),
                ff_b2: push(p("ff.b2"), vec![d]),
            });
        }
        let lnf_g = push("lnf.g".into(), vec![d]);
        let lnf_b = push("lnf.b".into(), vec![d]);
        Self {
            tensors,
            total,
            tok_emb,
            pos_emb,
            head_bias,
            map_w1,
            map_b1,
            map_w2,
            map_b2,
            blocks,
            lnf_g,
            lnf_b,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Which parameter tensors a training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub mapping_net: bool,
    pub token_embeddings: bool,
}

/// Parameters, architecture and lexicon of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyVlm {
    config: ModelConfig,
    lexicon: Lexicon,
    params: Vec<f32>,
}

impl TinyVlm {
    pub fn new(config: ModelConfig, lexicon: Lexicon, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, lexicon.len());
        let mut params = vec![0.0f32; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        for t in layout.tensors() {
            let slice = &mut params[t.range()];
            let name = t.name.as_str();
            if name.ends_with(".g") {
                slice.fill(1.0);
            } else if name == "pos_emb" {
                init_positions(slice, config.d_model, config.init_std);
            } else if name.starts_with("map.w") {
                let std = config.map_gain / (t.shape[0] as f64).sqrt();
                let map_normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                for v in slice.iter_mut() {
                    *v = map_normal.sample(&mut rng) as f32;
                }
            } else if t.shape.len() == 2 {
                // residual projections shrink with depth
                let scale = if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                    1.0 / (2.0 * config.n_layers as f64).sqrt()
                } else {
                    1.0
                };
                for v in slice.iter_mut() {
                    *v = (normal.sample(&mut rng) * scale) as f32;
                }
            }
        }
        let mut m = Self {
            config,
            lexicon,
            params,
        };
        // dynamic slots stay zero until an evaluation task binds them
        for id in m.lexicon.dynamic_range() {
            m.token_row_mut(id as TokenId).fill(0.0);
        }
        Ok(m)
    }

    pub(crate) fn from_parts(config: ModelConfig, lexicon: Lexicon, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, lexicon.len());
        if params.len() != layout.total() {
            return Err(Error::config(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self {
            config,
            lexicon,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config, self.lexicon.len())
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout().tensor(name).map(|t| &self.params[t.range()])
    }

    pub fn token_row(&self, id: TokenId) -> &[f32] {
        let d = self.config.d_model;
        let off = self.layout().tok_emb + id as usize * d;
        &self.params[off..off + d]
    }

    pub fn token_row_mut(&mut self, id: TokenId) -> &mut [f32] {
        let d = self.config.d_model;
        let off = self.layout().tok_emb + id as usize * d;
        &mut self.params[off..off + d]
    }

    /// Same weights over a larger lexicon; rows for new words are drawn
    /// from the initialization distribution.
    pub fn with_lexicon(&self, lexicon: Lexicon, seed: u64) -> Result<Self> {
        for (i, t) in self.lexicon.tokens().iter().enumerate() {
            if lexicon.id(t) != Some(i as TokenId) {
                return Err(Error::config(format!("new lexicon moves token {t:?}")));
            }
        }
        let old_layout = self.layout();
        let new_layout = ParamLayout::new(&self.config, lexicon.len());
        let mut params = vec![0.0f32; new_layout.total()];
        for (old, new) in old_layout.tensors().iter().zip(new_layout.tensors()) {
            let src = &self.params[old.range()];
            params[new.offset..new.offset + src.len()].copy_from_slice(src);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let d = self.config.d_model;
        for id in self.lexicon.len()..lexicon.len() {
            let off = new_layout.tok_emb + id * d;
            for v in &mut params[off..off + d] {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        Self::from_parts(self.config.clone(), lexicon, params)
    }

    /// Visual prefix (`prefix_len x d_model`, row-major) for one embedding.
    pub fn map_visual(&self, embedding: &[f32]) -> Result<Vec<f32>> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::config(format!(
                "embedding has {} dims, mapping network expects {}",
                embedding.len(),
                self.config.embed_dim
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding".into()));
        }
        let e: Vec<f32> = embedding.to_vec();
        let (_, out) = forward::map_visual_cached(&self.config, &self.layout(), &self.params, &e);
        Ok(out)
    }

    /// Mean of the visual prefix rows, in token-embedding space.
    pub fn pooled_prefix(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        let prefix = self.map_visual(embedding)?;
        let d = self.config.d_model;
        let p = self.config.prefix_len as f64;
        let mut pooled = vec![0.0f64; d];
        for row in prefix.chunks(d) {
            for (a, &v) in pooled.iter_mut().zip(row) {
                *a += f64::from(v);
            }
        }
        Ok(pooled.into_iter().map(|v| v / p).collect())
    }

    /// Per-element mask of parameters a stage may update. Dynamic token slots
    /// are never trained.
    pub fn trainable_mask(&self, set: TrainableSet) -> Vec<bool> {
        let layout = self.layout();
        let mut mask = vec![true; layout.total()];
        let d = self.config.d_model;
        for t in layout.tensors() {
            let frozen =
                (!set.mapping_net && t.name.starts_with("map.")) || (!set.token_embeddings && t.name == "tok_emb");
            if frozen {
                mask[t.range()].fill(false);
            }
        }
        for id in self.lexicon.dynamic_range() {
            mask[layout.tok_emb + id * d..layout.tok_emb + (id + 1) * d].fill(false);
            mask[layout.head_bias + id] = false;
        }
        mask
    }

    /// Root-mean-square of the token rows of `ids`; falls back to the init std.
    pub fn token_rms(&self, ids: &[TokenId]) -> f64 {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for &id in ids {
            for &v in self.token_row(id) {
                sum += f64::from(v) * f64::from(v);
                n += 1;
            }
        }
        if n == 0 || sum == 0.0 {
            self.config.init_std
        } else {
            (sum / n as f64).sqrt()
        }
    }

    /// Rewrites the embeddings of the first `count` dynamic slots from a
    /// seeded Gaussian and zeroes their output bias.
    pub fn bind_dynamic_slots(&mut self, count: usize, std: f64, seed: u64) -> Result<Vec<TokenId>> {
        let range = self.lexicon.dynamic_range();
        if count > range.len() {
            return Err(Error::config(format!(
                "task needs {count} dynamic slots, lexicon reserves {}",
                range.len()
            )));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_bias = self.layout().head_bias;
        let mut ids = Vec::with_capacity(count);
        for slot in 0..count {
            let id = self.lexicon.dynamic_id(slot).expect("slot in range");
            for v in self.token_row_mut(id) {
                *v = normal.sample(&mut rng) as f32;
            }
            self.params[head_bias + id as usize] = 0.0;
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// Sinusoidal table scaled so each component has standard deviation `std`.
fn init_positions(slice: &mut [f32], d: usize, std: f64) {
    let scale = std * std::f64::consts::SQRT_2;
    for (pos, row) in slice.chunks_mut(d).enumerate() {
        for i in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            row[2 * i] = (a.sin() * scale) as f32;
            row[2 * i + 1] = (a.cos() * scale) as f32;
        }
    }
}
