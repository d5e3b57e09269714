//! The trainable micro-transformer: token embedding plus layout tokenizer
//! feeding pre-norm decoder blocks, with a text head and a layout head.

use super::block::{Block, BlockCache};
use super::layers::{LayerNorm, LayerNormCache, Linear};
use super::tensor::Param;
use crate::error::{Error, Result};
use crate::layout::{LayTokCache, LayoutHead, LayoutTokenizer};
use crate::ntlp::InterleavedSequence;
use crate::tokenizer::VOCAB_SIZE;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. Layout and text embeddings share the model
/// width, so one layout token is exactly one stream slot wide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    /// Hard limit on sequence slots per forward pass.
    #[serde(default = "defaults::max_context")]
    pub max_context: usize,
    #[serde(default = "defaults::rope_base")]
    pub rope_base: f64,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
}

mod defaults {
    pub fn d_model() -> usize {
        64
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn n_layers() -> usize {
        2
    }
    pub fn vocab_size() -> usize {
        super::VOCAB_SIZE
    }
    pub fn max_context() -> usize {
        512
    }
    pub fn rope_base() -> f64 {
        10000.0
    }
    pub fn d_ff() -> usize {
        4 * d_model()
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            n_layers: defaults::n_layers(),
            vocab_size: defaults::vocab_size(),
            max_context: defaults::max_context(),
            rope_base: defaults::rope_base(),
            d_ff: defaults::d_ff(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary pairs",
                self.d_model / self.n_heads
            )));
        }
        // Byte streams need the full byte vocabulary, but synthetic
        // sequences with hand-picked ids may use less; forward rejects any
        // id outside the configured vocab.
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} is too small to predict anything",
                self.vocab_size
            )));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total learnable scalar count of a model built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 2 * (2 * d) // two layer norms
            + 4 * (d * d + d) // attention projections
            + (self.d_ff * d + self.d_ff) + (d * self.d_ff + d); // mlp
        self.vocab_size * d
            + self.n_layers * per_block
            + 2 * d // final norm
            + (self.vocab_size * d + self.vocab_size) // text head
            + (4 * d + 4) // layout head
            + LayoutTokenizer::param_count(d)
    }
}

/// Input view of one sequence slot for the embedding stage.
#[derive(Debug, Clone, Copy)]
pub enum TokenInput {
    Text(u32),
    Layout(crate::doc::BBox),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// `(vocab, d)` token embedding table.
    pub tok_emb: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub text_head: Linear,
    pub lay_head: LayoutHead,
    pub laytok: LayoutTokenizer,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    block_caches: Vec<BlockCache>,
    lnf: LayerNormCache,
    /// Cross-attention caches for layout slots, keyed by slot index.
    laytok_caches: Vec<(usize, LayTokCache)>,
}

const INIT_STD: f64 = 0.02;

impl Model {
    /// Build with weights drawn N(0, 0.02) and zero biases, deterministically
    /// from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Param::normal(&[config.vocab_size, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block::new(d, config.n_heads, config.d_ff, config.rope_base, INIT_STD, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(d);
        let text_head = Linear::new(d, config.vocab_size, INIT_STD, &mut rng);
        let lay_head = LayoutHead::new(d, INIT_STD, &mut rng);
        let laytok = LayoutTokenizer::new(d, INIT_STD, &mut rng);
        Ok(Model {
            config,
            tok_emb,
            blocks,
            ln_f,
            text_head,
            lay_head,
            laytok,
        })
    }

    /// Hidden states (one d-vector per slot) for an interleaved sequence.
    ///
    /// Causality is by slot index; layout tokens ride through attention
    /// exactly like text tokens.
    pub fn forward(&self, seq: &InterleavedSequence) -> Result<(Vec<f64>, ForwardCache)> {
        let s = seq.len();
        if s == 0 {
            return Err(Error::Argument("empty sequence".into()));
        }
        if s > self.config.max_context {
            return Err(Error::ContextOverflow {
                required: s,
                available: self.config.max_context,
            });
        }
        let d = self.config.d_model;
        let positions = seq.position_ids();

        let mut x = vec![0.0; s * d];
        let mut laytok_caches = Vec::new();
        for (i, input) in seq.model_inputs().iter().enumerate() {
            match input {
                TokenInput::Text(id) => {
                    let id = *id as usize;
                    if id >= self.config.vocab_size {
                        return Err(Error::Argument(format!(
                            "token id {id} outside vocab {}",
                            self.config.vocab_size
                        )));
                    }
                    x[i * d..(i + 1) * d].copy_from_slice(self.tok_emb.value.row(id));
                }
                TokenInput::Layout(bbox) => {
                    let (b, cache) = self.laytok.forward(bbox)?;
                    x[i * d..(i + 1) * d].copy_from_slice(&b);
                    laytok_caches.push((i, cache));
                }
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, &positions)?;
            block_caches.push(cache);
            x = next;
        }
        let (hidden, lnf) = self.ln_f.forward(&x, s);
        Ok((
            hidden,
            ForwardCache {
                block_caches,
                lnf,
                laytok_caches,
            },
        ))
    }

    /// Backpropagate `dhidden` (gradient on the final hidden states) into
    /// every parameter, including the layout tokenizer feeding layout slots.
    pub fn backward(
        &mut self,
        seq: &InterleavedSequence,
        cache: &ForwardCache,
        dhidden: &[f64],
    ) -> Result<()> {
        let s = seq.len();
        let d = self.config.d_model;
        let mut dx = self.ln_f.backward(&cache.lnf, dhidden, s);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.block_caches).rev() {
            dx = block.backward(bc, &dx, s);
        }
        let mut lay_iter = cache.laytok_caches.iter().peekable();
        for (i, input) in seq.model_inputs().iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            match input {
                TokenInput::Text(id) => {
                    let g = &mut self.tok_emb.grad.data[*id as usize * d..(*id as usize + 1) * d];
                    for (a, b) in g.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                TokenInput::Layout(_) => {
                    let (slot, ltc) = lay_iter.next().ok_or_else(|| {
                        Error::Numeric("layout cache exhausted in backward".into())
                    })?;
                    debug_assert_eq!(*slot, i);
                    self.laytok.backward(ltc, row);
                }
            }
        }
        Ok(())
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = vec![("tok_emb".into(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("blocks.{i}.ln1.beta"), &b.ln1.beta));
            out.push((format!("blocks.{i}.attn.wq.weight"), &b.attn.wq.weight));
            out.push((format!("blocks.{i}.attn.wq.bias"), &b.attn.wq.bias));
            out.push((format!("blocks.{i}.attn.wk.weight"), &b.attn.wk.weight));
            out.push((format!("blocks.{i}.attn.wk.bias"), &b.attn.wk.bias));
            out.push((format!("blocks.{i}.attn.wv.weight"), &b.attn.wv.weight));
            out.push((format!("blocks.{i}.attn.wv.bias"), &b.attn.wv.bias));
            out.push((format!("blocks.{i}.attn.wo.weight"), &b.attn.wo.weight));
            out.push((format!("blocks.{i}.attn.wo.bias"), &b.attn.wo.bias));
            out.push((format!("blocks.{i}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("blocks.{i}.ln2.beta"), &b.ln2.beta));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), &b.mlp.fc1.weight));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), &b.mlp.fc1.bias));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), &b.mlp.fc2.weight));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), &b.mlp.fc2.bias));
        }
        out.push(("ln_f.gamma".into(), &self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &self.ln_f.beta));
        out.push(("text_head.weight".into(), &self.text_head.weight));
        out.push(("text_head.bias".into(), &self.text_head.bias));
        out.push(("lay_head.weight".into(), &self.lay_head.lin.weight));
        out.push(("lay_head.bias".into(), &self.lay_head.lin.bias));
        for (name, p) in self.laytok.params() {
            out.push((name.into(), p));
        }
        out
    }

    /// Mutable view of the same parameters, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = vec![("tok_emb".into(), &mut self.tok_emb)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gamma"), &mut b.ln1.gamma));
            out.push((format!("blocks.{i}.ln1.beta"), &mut b.ln1.beta));
            out.push((format!("blocks.{i}.attn.wq.weight"), &mut b.attn.wq.weight));
            out.push((format!("blocks.{i}.attn.wq.bias"), &mut b.attn.wq.bias));
            out.push((format!("blocks.{i}.attn.wk.weight"), &mut b.attn.wk.weight));
            out.push((format!("blocks.{i}.attn.wk.bias"), &mut b.attn.wk.bias));
            out.push((format!("blocks.{i}.attn.wv.weight"), &mut b.attn.wv.weight));
            out.push((format!("blocks.{i}.attn.wv.bias"), &mut b.attn.wv.bias));
            out.push((format!("blocks.{i}.attn.wo.weight"), &mut b.attn.wo.weight));
            out.push((format!("blocks.{i}.attn.wo.bias"), &mut b.attn.wo.bias));
            out.push((format!("blocks.{i}.ln2.gamma"), &mut b.ln2.gamma));
            out.push((format!("blocks.{i}.ln2.beta"), &mut b.ln2.beta));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), &mut b.mlp.fc1.weight));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), &mut b.mlp.fc1.bias));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), &mut b.mlp.fc2.weight));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), &mut b.mlp.fc2.bias));
        }
        out.push(("ln_f.gamma".into(), &mut self.ln_f.gamma));
        out.push(("ln_f.beta".into(), &mut self.ln_f.beta));
        out.push(("text_head.weight".into(), &mut self.text_head.weight));
        out.push(("text_head.bias".into(), &mut self.text_head.bias));
        out.push(("lay_head.weight".into(), &mut self.lay_head.lin.weight));
        out.push(("lay_head.bias".into(), &mut self.lay_head.lin.bias));
        for (name, p) in self.laytok.params_mut() {
            out.push((name.into(), p));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Flatten parameter values in visit order.
    pub fn params_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, p) in self.params() {
            out.extend_from_slice(&p.value.data);
        }
        out
    }

    pub fn set_params_from_vec(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.param_count();
        if flat.len() != expected {
            return Err(Error::Argument(format!(
                "flat parameter vector has {} values, model needs {expected}",
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, p) in self.params_mut() {
            let n = p.numel();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Flatten gradients in visit order.
    pub fn grads_to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, p) in self.params() {
            out.extend_from_slice(&p.grad.data);
        }
        out
    }

    /// Add a flat gradient vector (as produced by [`Model::grads_to_vec`]).
    pub fn add_grads_from_vec(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, p) in self.params_mut() {
            let n = p.numel();
            for (g, v) in p.grad.data.iter_mut().zip(&flat[off..off + n]) {
                *g += v;
            }
            off += n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ntlp::{InterleavedSequence, TokenKind, TypedToken};

    fn text_seq(ids: &[u32]) -> InterleavedSequence {
        InterleavedSequence {
            tokens: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| TypedToken {
                    kind: TokenKind::Text(id),
                    position_id: i,
                    supervise: true,
                })
                .collect(),
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_context: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_param_count_matches_built_model() {
        let config = tiny_config();
        let model = Model::new(config.clone(), 1).unwrap();
        assert_eq!(model.param_count(), config.param_count());
        let config = ModelConfig::default();
        let model = Model::new(config.clone(), 2).unwrap();
        assert_eq!(model.param_count(), config.param_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let seq = text_seq(&[257, 97, 98, 99]);
        let (h1, _) = model.forward(&seq).unwrap();
        let (h2, _) = model.forward(&seq).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn single_token_hidden_is_position_independent() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let mut seq = text_seq(&[97]);
        let (h0, _) = model.forward(&seq).unwrap();
        seq.tokens[0].position_id = 7;
        let (h7, _) = model.forward(&seq).unwrap();
        for (a, b) in h0.iter().zip(&h7) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_future_tokens_preserves_prefix() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let a = text_seq(&[257, 97, 98, 99, 100]);
        let mut b = text_seq(&[257, 97, 98, 100, 99]);
        b.tokens[3].position_id = 3;
        b.tokens[4].position_id = 4;
        let (ha, _) = model.forward(&a).unwrap();
        let (hb, _) = model.forward(&b).unwrap();
        let d = 16;
        assert_eq!(&ha[..3 * d], &hb[..3 * d]);
    }

    #[test]
    fn all_zero_params_give_uniform_logits() {
        let mut model = Model::new(tiny_config(), 6).unwrap();
        for (_, p) in model.params_mut() {
            p.value.fill(0.0);
        }
        let seq = text_seq(&[97, 98]);
        let (hidden, _) = model.forward(&seq).unwrap();
        let logits = model.text_head.forward(&hidden[..16], 1);
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let seq = text_seq(&vec![97; 33]);
        match model.forward(&seq) {
            Err(Error::ContextOverflow { required, available }) => {
                assert_eq!(required, 33);
                assert_eq!(available, 32);
            }
            other => panic!("expected overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let mut model = Model::new(tiny_config(), 8).unwrap();
        let flat = model.params_to_vec();
        model.set_params_from_vec(&flat).unwrap();
        assert_eq!(model.params_to_vec(), flat);
    }
}
