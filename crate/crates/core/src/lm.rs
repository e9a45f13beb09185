//! Decoder-only transformer over the unified vocabulary.
//!
//! Pre-norm blocks: `x += Wo·attn(rmsnorm(x))`, `x += W2·silu(W1·rmsnorm(x))`,
//! then a final RMS norm and a (by default) tied readout `logits = x·E^T`.
//! No biases anywhere; learned absolute positions added to token embeddings.
//! Weights init at std 0.02, with the two residual-writing projections per
//! block (`wo`, `w2`) scaled by 1/sqrt(2·layers) so residual variance stays
//! flat with depth.
//!
//! Loss convention: the logits at position `i` predict token `i+1`, weighted
//! by the example's `loss_mask[i+1]`; the last position carries weight 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParamMap};
use crate::sequence::SequenceExample;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("model config: {0}")]
    Config(String),
    #[error("sequence length {seq} exceeds context {context}")]
    ContextExceeded { seq: usize, context: usize },
    #[error("token id {id} outside vocabulary {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example length {got}, batch is built for {expected}")]
    RaggedBatch { expected: usize, got: usize },
    #[error("vocabulary can only grow: {from} -> {to}")]
    VocabShrink { from: u32, to: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub tied: bool,
}

pub const LADDER: [&str; 4] = ["tiny", "small", "base", "large"];

impl LmConfig {
    fn ladder_point(vocab: u32, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self { vocab, d_model, n_layers, n_heads, context: 256, tied: true }
    }

    pub fn tiny(vocab: u32) -> Self {
        Self::ladder_point(vocab, 64, 2, 2)
    }

    pub fn small(vocab: u32) -> Self {
        Self::ladder_point(vocab, 128, 4, 4)
    }

    pub fn base(vocab: u32) -> Self {
        Self::ladder_point(vocab, 256, 6, 8)
    }

    pub fn large(vocab: u32) -> Self {
        Self::ladder_point(vocab, 384, 8, 8)
    }

    pub fn by_name(name: &str, vocab: u32) -> Result<Self, LmError> {
        match name {
            "tiny" => Ok(Self::tiny(vocab)),
            "small" => Ok(Self::small(vocab)),
            "base" => Ok(Self::base(vocab)),
            "large" => Ok(Self::large(vocab)),
            other => Err(LmError::Config(format!("unknown model size {other:?}"))),
        }
    }

    pub fn d_ff(&self) -> usize {
        2 * self.d_model
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab < 2 {
            return Err(LmError::Config(format!("vocab {} too small", self.vocab)));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.context == 0 {
            return Err(LmError::Config("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count; checked against the allocated
    /// tensors in tests.
    pub fn param_count(&self) -> usize {
        let (v, d, l, c) = (self.vocab as usize, self.d_model, self.n_layers, self.context);
        let per_layer = 2 * d + 4 * d * d + 2 * d * self.d_ff();
        let head = if self.tied { 0 } else { v * d };
        v * d + c * d + l * per_layer + d + head
    }
}

#[derive(Debug, Clone)]
pub struct LmModel<T: Scalar> {
    pub cfg: LmConfig,
    pub params: ParamMap<T>,
}

struct LayerIdx {
    att_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w1: usize,
    w2: usize,
}

struct LmIdx {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    lm_head: Option<usize>,
}

impl LmIdx {
    fn resolve<T: Scalar>(cfg: &LmConfig, p: &ParamMap<T>) -> Result<Self, LmError> {
        let at =
            |n: &str| p.index_of(n).ok_or_else(|| LmError::Config(format!("missing tensor {n}")));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(LayerIdx {
                att_norm: at(&format!("l{i}.att.norm"))?,
                wq: at(&format!("l{i}.att.wq"))?,
                wk: at(&format!("l{i}.att.wk"))?,
                wv: at(&format!("l{i}.att.wv"))?,
                wo: at(&format!("l{i}.att.wo"))?,
                ffn_norm: at(&format!("l{i}.ffn.norm"))?,
                w1: at(&format!("l{i}.ffn.w1"))?,
                w2: at(&format!("l{i}.ffn.w2"))?,
            });
        }
        Ok(Self {
            tok_emb: at("tok_emb")?,
            pos_emb: at("pos_emb")?,
            layers,
            final_norm: at("final_norm")?,
            lm_head: if cfg.tied { None } else { Some(at("lm_head")?) },
        })
    }
}

/// Opaque resolved tensor indices into the `ParamMap` entry order (the same
/// order `leaves` emits), so graph builders avoid name lookups per step.
pub struct LmIdxPub(LmIdx);

pub fn resolve_lm_vars<T: Scalar>(model: &LmModel<T>) -> Result<LmIdxPub, LmError> {
    Ok(LmIdxPub(LmIdx::resolve(&model.cfg, &model.params)?))
}

pub fn init_lm<T: Scalar>(cfg: &LmConfig, seed: u64) -> Result<LmModel<T>, LmError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, d) = (cfg.vocab as usize, cfg.d_model);
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
    let mut p = ParamMap::new();
    p.insert("tok_emb", Tensor::randn(&[v, d], std, &mut rng), true)?;
    p.insert("pos_emb", Tensor::randn(&[cfg.context, d], std, &mut rng), true)?;
    for i in 0..cfg.n_layers {
        p.insert(&format!("l{i}.att.norm"), Tensor::full(&[d], T::one()), true)?;
        p.insert(&format!("l{i}.att.wq"), Tensor::randn(&[d, d], std, &mut rng), true)?;
        p.insert(&format!("l{i}.att.wk"), Tensor::randn(&[d, d], std, &mut rng), true)?;
        p.insert(&format!("l{i}.att.wv"), Tensor::randn(&[d, d], std, &mut rng), true)?;
        p.insert(&format!("l{i}.att.wo"), Tensor::randn(&[d, d], resid_std, &mut rng), true)?;
        p.insert(&format!("l{i}.ffn.norm"), Tensor::full(&[d], T::one()), true)?;
        p.insert(&format!("l{i}.ffn.w1"), Tensor::randn(&[d, cfg.d_ff()], std, &mut rng), true)?;
        p.insert(
            &format!("l{i}.ffn.w2"),
            Tensor::randn(&[cfg.d_ff(), d], resid_std, &mut rng),
            true,
        )?;
    }
    p.insert("final_norm", Tensor::full(&[d], T::one()), true)?;
    if !cfg.tied {
        p.insert("lm_head", Tensor::randn(&[v, d], std, &mut rng), true)?;
    }
    Ok(LmModel { cfg: *cfg, params: p })
}

/// Grows the vocabulary to `new_vocab`, appending fresh rows (std 0.02) to
/// the token embedding (and untied head). Logits over the original id range
/// are bit-identical for inputs drawn from the original range.
pub fn extend_vocab<T: Scalar>(
    model: &mut LmModel<T>,
    new_vocab: u32,
    seed: u64,
) -> Result<(), LmError> {
    if new_vocab < model.cfg.vocab {
        return Err(LmError::VocabShrink { from: model.cfg.vocab, to: new_vocab });
    }
    if new_vocab == model.cfg.vocab {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.cfg.d_model;
    let extra = (new_vocab - model.cfg.vocab) as usize;
    let mut grow = |p: &mut ParamMap<T>, name: &str| -> Result<(), LmError> {
        let idx = p.index_of(name).ok_or_else(|| LmError::Config(format!("missing {name}")))?;
        let old = p.tensor(idx);
        let fresh = Tensor::randn(&[extra, d], 0.02, &mut rng);
        let mut data = old.data().to_vec();
        data.extend_from_slice(fresh.data());
        *p.tensor_mut(idx) = Tensor::from_vec(&[old.shape()[0] + extra, d], data)?;
        Ok(())
    };
    grow(&mut model.params, "tok_emb")?;
    if !model.cfg.tied {
        grow(&mut model.params, "lm_head")?;
    }
    model.cfg.vocab = new_vocab;
    Ok(())
}

/// Builds the forward graph for `batch` sequences of equal length, ids laid
/// out contiguously per sequence. Returns logits `[batch·seq, vocab]`.
pub fn lm_logits<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &LmIdxPub,
    cfg: &LmConfig,
    ids: &[u32],
    batch: usize,
) -> Result<Var, LmError> {
    lm_logits_impl(tape, vars, idx, cfg, ids, batch, false)
}

/// Like [`lm_logits`], but projects only each sequence's final position
/// through the readout: logits `[batch, vocab]`. The transformer stack still
/// runs over the whole prefix; only the vocabulary matmul shrinks, which is
/// what dominates step cost during token-by-token decoding.
pub fn lm_logits_last<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &LmIdxPub,
    cfg: &LmConfig,
    ids: &[u32],
    batch: usize,
) -> Result<Var, LmError> {
    lm_logits_impl(tape, vars, idx, cfg, ids, batch, true)
}

fn lm_logits_impl<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &LmIdxPub,
    cfg: &LmConfig,
    ids: &[u32],
    batch: usize,
    last_only: bool,
) -> Result<Var, LmError> {
    if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
        return Err(LmError::EmptyBatch);
    }
    let seq = ids.len() / batch;
    if seq > cfg.context {
        return Err(LmError::ContextExceeded { seq, context: cfg.context });
    }
    for &id in ids {
        if id >= cfg.vocab {
            return Err(LmError::TokenOutOfRange { id, vocab: cfg.vocab });
        }
    }
    let i = &idx.0;
    let tok_ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let pos_ids: Vec<usize> = (0..ids.len()).map(|k| k % seq).collect();
    let tok = tape.gather_rows(vars[i.tok_emb], &tok_ids)?;
    let pos = tape.gather_rows(vars[i.pos_emb], &pos_ids)?;
    let mut x = tape.add(tok, pos)?;
    for l in &i.layers {
        let h = tape.rms_norm(x, vars[l.att_norm])?;
        let q = tape.matmul(h, vars[l.wq])?;
        let k = tape.matmul(h, vars[l.wk])?;
        let v = tape.matmul(h, vars[l.wv])?;
        let a = tape.causal_attention(q, k, v, batch, cfg.n_heads)?;
        let o = tape.matmul(a, vars[l.wo])?;
        x = tape.add(x, o)?;
        let h2 = tape.rms_norm(x, vars[l.ffn_norm])?;
        let f1 = tape.matmul(h2, vars[l.w1])?;
        let f1 = tape.silu(f1);
        let f2 = tape.matmul(f1, vars[l.w2])?;
        x = tape.add(x, f2)?;
    }
    let mut x = tape.rms_norm(x, vars[i.final_norm])?;
    if last_only {
        let last_rows: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
        x = tape.gather_rows(x, &last_rows)?;
    }
    let head = vars[i.lm_head.unwrap_or(i.tok_emb)];
    let head_t = tape.transpose(head)?;
    Ok(tape.matmul(x, head_t)?)
}

/// A fixed-length batch ready for the forward pass: flat ids plus the
/// shifted next-token targets and weights aligned with logits rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmBatch {
    pub ids: Vec<u32>,
    pub targets: Vec<usize>,
    pub weights: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

pub fn batch_from_examples(examples: &[&SequenceExample]) -> Result<LmBatch, LmError> {
    let first = examples.first().ok_or(LmError::EmptyBatch)?;
    let seq = first.tokens.len();
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut targets = Vec::with_capacity(examples.len() * seq);
    let mut weights = Vec::with_capacity(examples.len() * seq);
    for ex in examples {
        if ex.tokens.len() != seq {
            return Err(LmError::RaggedBatch { expected: seq, got: ex.tokens.len() });
        }
        ids.extend_from_slice(&ex.tokens);
        for i in 0..seq {
            if i + 1 < seq {
                targets.push(ex.tokens[i + 1] as usize);
                weights.push(ex.loss_mask[i + 1]);
            } else {
                targets.push(0);
                weights.push(0);
            }
        }
    }
    Ok(LmBatch { ids, targets, weights, batch: examples.len(), seq })
}
