//! Training-sequence assembly: the three task formats, the i2t loss mask,
//! and the deterministic mixed stream.
//!
//! Formats (ids from the unified vocabulary):
//!   text: `[bos] text [eos]`
//!   t2i:  `[bos] caption + " length is:{rows} width is:{cols}" [boi] codes [eoi] [eos]`
//!   i2t:  `[bos] [boi] codes [eoi] caption [eos]`
//! Loss masks weight prediction targets: text and t2i train on every
//! non-pad target; i2t masks every position whose target lies at or before
//! `[eoi]`, so the loss covers only the caption and `[eos]`. Examples are
//! padded to the context length with `[pad]` (mask 0). Records that exceed
//! the context are skipped, never truncated — truncation would break the
//! grid contract.

use rand::distr::weighted::WeightedIndex;
use rand::prelude::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeVocab;
use crate::seeding::mix_seed;
use crate::vocab::{UnifiedVocab, VocabError};
use crate::vq::CodeGrid;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("sequence of {needed} tokens exceeds context {context}")]
    Overlong { needed: usize, context: usize },
    #[error("mix needs at least one positive ratio")]
    AllZeroRatios,
    #[error("{kind} ratio is positive but its corpus is empty")]
    EmptyCorpus { kind: &'static str },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Text,
    T2i,
    I2t,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Text => "text",
            TaskKind::T2i => "t2i",
            TaskKind::I2t => "i2t",
        }
    }
}

/// One training example: ids padded to a fixed length and per-position loss
/// weights for the *target* at each position (weight[i] governs predicting
/// tokens[i] from its prefix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub kind: TaskKind,
}

/// The resolution suffix appended to every t2i caption.
pub fn resolution_suffix(rows: usize, cols: usize) -> String {
    format!(" length is:{rows} width is:{cols}")
}

fn pad_to_context(
    mut tokens: Vec<u32>,
    mut mask: Vec<u8>,
    vocab: &UnifiedVocab,
    context: usize,
    kind: TaskKind,
) -> Result<SequenceExample, SequenceError> {
    if tokens.len() > context {
        return Err(SequenceError::Overlong { needed: tokens.len(), context });
    }
    tokens.resize(context, vocab.pad());
    mask.resize(context, 0);
    Ok(SequenceExample { tokens, loss_mask: mask, kind })
}

/// `[bos] text [eos]`, loss over every non-pad target.
pub fn build_text(
    text: &str,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    context: usize,
) -> Result<SequenceExample, SequenceError> {
    let mut tokens = vec![vocab.bos()];
    tokens.extend(bpe.encode_str(text));
    tokens.push(vocab.eos());
    let mask = vec![1u8; tokens.len()];
    pad_to_context(tokens, mask, vocab, context, TaskKind::Text)
}

/// `[bos] caption+suffix [boi] codes [eoi] [eos]`, loss over every non-pad
/// target (the prompt is trained too; only i2t masks).
pub fn build_t2i(
    caption: &str,
    grid: &CodeGrid,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    context: usize,
) -> Result<SequenceExample, SequenceError> {
    let prompt = format!("{caption}{}", resolution_suffix(grid.rows(), grid.cols()));
    let mut tokens = vec![vocab.bos()];
    tokens.extend(bpe.encode_str(&prompt));
    tokens.push(vocab.boi());
    for &code in grid.indices() {
        tokens.push(vocab.image_id_of_code(code)?);
    }
    tokens.push(vocab.eoi());
    tokens.push(vocab.eos());
    let mask = vec![1u8; tokens.len()];
    pad_to_context(tokens, mask, vocab, context, TaskKind::T2i)
}

/// `[bos] [boi] codes [eoi] caption [eos]`; loss only where the target is a
/// caption token or `[eos]` — mask 0 on every position whose target is at
/// or before `[eoi]`.
pub fn build_i2t(
    grid: &CodeGrid,
    caption: &str,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    context: usize,
) -> Result<SequenceExample, SequenceError> {
    let mut tokens = vec![vocab.bos(), vocab.boi()];
    for &code in grid.indices() {
        tokens.push(vocab.image_id_of_code(code)?);
    }
    tokens.push(vocab.eoi());
    let eoi_index = tokens.len() - 1;
    tokens.extend(bpe.encode_str(caption));
    tokens.push(vocab.eos());
    let mask: Vec<u8> = (0..tokens.len()).map(|i| u8::from(i > eoi_index)).collect();
    pad_to_context(tokens, mask, vocab, context, TaskKind::I2t)
}

/// Mixing ratios text : t2i : i2t plus the stream seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub text: u32,
    pub t2i: u32,
    pub i2t: u32,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(text: u32, t2i: u32, i2t: u32, seed: u64) -> Result<Self, SequenceError> {
        if text == 0 && t2i == 0 && i2t == 0 {
            return Err(SequenceError::AllZeroRatios);
        }
        Ok(Self { text, t2i, i2t, seed })
    }
}

/// Pre-built example pools, one per task kind.
#[derive(Debug, Clone, Default)]
pub struct ExamplePools {
    pub text: Vec<SequenceExample>,
    pub t2i: Vec<SequenceExample>,
    pub i2t: Vec<SequenceExample>,
}

/// Deterministic infinite stream over the pools: each draw picks a kind by
/// ratio weight, then an example uniformly from that pool. Draw `i` depends
/// only on (spec, i), so any step can be reproduced without replaying.
#[derive(Debug, Clone)]
pub struct MixStream<'a> {
    pools: &'a ExamplePools,
    spec: MixSpec,
    weights: WeightedIndex<u32>,
}

impl<'a> MixStream<'a> {
    pub fn new(pools: &'a ExamplePools, spec: MixSpec) -> Result<Self, SequenceError> {
        if spec.text == 0 && spec.t2i == 0 && spec.i2t == 0 {
            return Err(SequenceError::AllZeroRatios);
        }
        for (ratio, pool, kind) in [
            (spec.text, &pools.text, "text"),
            (spec.t2i, &pools.t2i, "t2i"),
            (spec.i2t, &pools.i2t, "i2t"),
        ] {
            if ratio > 0 && pool.is_empty() {
                return Err(SequenceError::EmptyCorpus { kind });
            }
        }
        let weights = WeightedIndex::new([spec.text, spec.t2i, spec.i2t])
            .expect("at least one positive ratio");
        Ok(Self { pools, spec, weights })
    }

    /// The `i`-th example of the stream.
    pub fn draw(&self, i: u64) -> &'a SequenceExample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.spec.seed, i));
        let pool = match self.weights.sample(&mut rng) {
            0 => &self.pools.text,
            1 => &self.pools.t2i,
            _ => &self.pools.i2t,
        };
        let j = (rand::RngCore::next_u64(&mut rng) % pool.len() as u64) as usize;
        &pool[j]
    }

    /// Examples `[step·batch, (step+1)·batch)` — one training batch.
    pub fn batch(&self, step: u64, batch_size: usize) -> Vec<&'a SequenceExample> {
        (0..batch_size as u64).map(|k| self.draw(step * batch_size as u64 + k)).collect()
    }
}

/// Skip-counting wrapper: builds a pool, dropping overlong records and
/// counting them; other errors propagate.
pub struct PoolBuilder {
    pub skipped_overlong: usize,
}

impl PoolBuilder {
    pub fn new() -> Self {
        Self { skipped_overlong: 0 }
    }

    pub fn push(
        &mut self,
        pool: &mut Vec<SequenceExample>,
        ex: Result<SequenceExample, SequenceError>,
    ) -> Result<(), SequenceError> {
        match ex {
            Ok(e) => {
                pool.push(e);
                Ok(())
            }
            Err(SequenceError::Overlong { .. }) => {
                self.skipped_overlong += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

impl Default for PoolBuilder {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::BpeVocab;
    use crate::vocab::{Modality, UnifiedVocab};

    fn fixtures() -> (BpeVocab, UnifiedVocab) {
        let bpe = BpeVocab::bytes_only();
        let vocab = UnifiedVocab::new(bpe.size() as u32, 16).unwrap();
        (bpe, vocab)
    }

    fn grid_8x8() -> CodeGrid {
        CodeGrid::new(8, 8, (0..64).map(|i| (i % 16) as u32).collect()).unwrap()
    }

    #[test]
    fn text_format_and_mask() {
        let (bpe, vocab) = fixtures();
        let ex = build_text("hi", &bpe, &vocab, 16).unwrap();
        assert_eq!(ex.tokens[0], vocab.bos());
        assert_eq!(ex.tokens[3], vocab.eos());
        assert_eq!(&ex.tokens[4..], &[vocab.pad(); 12]);
        assert_eq!(&ex.loss_mask[..4], &[1, 1, 1, 1]);
        assert_eq!(&ex.loss_mask[4..], &[0; 12]);
        assert_eq!(ex.kind, TaskKind::Text);
    }

    #[test]
    fn empty_text_is_bos_eos() {
        let (bpe, vocab) = fixtures();
        let ex = build_text("", &bpe, &vocab, 4).unwrap();
        assert_eq!(&ex.tokens[..2], &[vocab.bos(), vocab.eos()]);
        assert_eq!(ex.loss_mask, &[1, 1, 0, 0]);
    }

    #[test]
    fn text_token_count_is_encode_plus_two() {
        let (bpe, vocab) = fixtures();
        let text = "a red circle";
        let ex = build_text(text, &bpe, &vocab, 64).unwrap();
        let non_pad = ex.tokens.iter().filter(|&&t| t != vocab.pad()).count();
        assert_eq!(non_pad, bpe.encode_str(text).len() + 2);
    }

    #[test]
    fn t2i_format_brackets_and_length() {
        let (bpe, vocab) = fixtures();
        let grid = grid_8x8();
        let caption = "a red circle in the top left";
        let ex = build_t2i(caption, &grid, &bpe, &vocab, 256).unwrap();
        let suffix = resolution_suffix(8, 8);
        let c = bpe.encode_str(&format!("{caption}{suffix}")).len();
        let non_pad = ex.tokens.iter().filter(|&&t| t != vocab.pad()).count();
        assert_eq!(non_pad, c + 64 + 4);
        let boi = ex.tokens.iter().position(|&t| t == vocab.boi()).unwrap();
        let eoi = ex.tokens.iter().position(|&t| t == vocab.eoi()).unwrap();
        assert_eq!(eoi - boi - 1, 64);
        for &t in &ex.tokens[boi + 1..eoi] {
            assert_eq!(vocab.modality_of(t).unwrap(), Modality::Image);
        }
        // Loss covers the prompt: every non-pad position has weight 1.
        for (i, &t) in ex.tokens.iter().enumerate() {
            assert_eq!(ex.loss_mask[i], u8::from(t != vocab.pad()));
        }
    }

    #[test]
    fn t2i_image_span_roundtrips_to_codes() {
        let (bpe, vocab) = fixtures();
        let grid = grid_8x8();
        let ex = build_t2i("x", &grid, &bpe, &vocab, 128).unwrap();
        let boi = ex.tokens.iter().position(|&t| t == vocab.boi()).unwrap();
        let codes: Vec<u32> = ex.tokens[boi + 1..boi + 65]
            .iter()
            .map(|&t| vocab.code_of_image_id(t).unwrap())
            .collect();
        assert_eq!(codes.as_slice(), grid.indices());
    }

    #[test]
    fn i2t_mask_covers_caption_and_eos_only() {
        let (bpe, vocab) = fixtures();
        let grid = grid_8x8();
        let caption = "a blue square in the bottom right";
        let ex = build_i2t(&grid, caption, &bpe, &vocab, 256).unwrap();
        let eoi = ex.tokens.iter().position(|&t| t == vocab.eoi()).unwrap();
        for i in 0..=eoi {
            assert_eq!(ex.loss_mask[i], 0, "position {i} at or before [eoi] must be masked");
        }
        let caption_len = bpe.encode_str(caption).len();
        let masked_on: usize = ex.loss_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(masked_on, caption_len + 1);
        assert_eq!(ex.tokens[0], vocab.bos());
        assert_eq!(ex.tokens[1], vocab.boi());
        assert_eq!(ex.kind, TaskKind::I2t);
    }

    #[test]
    fn i2t_and_t2i_share_image_span_ids() {
        let (bpe, vocab) = fixtures();
        let grid = grid_8x8();
        let t2i = build_t2i("cap", &grid, &bpe, &vocab, 128).unwrap();
        let i2t = build_i2t(&grid, "cap", &bpe, &vocab, 128).unwrap();
        let span = |ex: &SequenceExample| {
            let a = ex.tokens.iter().position(|&t| t == vocab.boi()).unwrap();
            ex.tokens[a + 1..a + 65].to_vec()
        };
        assert_eq!(span(&t2i), span(&i2t));
    }

    #[test]
    fn overlong_records_error_and_pool_builder_counts_them() {
        let (bpe, vocab) = fixtures();
        let grid = grid_8x8();
        let err = build_t2i("caption", &grid, &bpe, &vocab, 32).unwrap_err();
        assert!(matches!(err, SequenceError::Overlong { context: 32, .. }));
        let mut pool = Vec::new();
        let mut builder = PoolBuilder::new();
        builder.push(&mut pool, build_text("ok", &bpe, &vocab, 64)).unwrap();
        builder
            .push(&mut pool, build_t2i("caption", &grid, &bpe, &vocab, 32))
            .unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(builder.skipped_overlong, 1);
    }

    fn pools(bpe: &BpeVocab, vocab: &UnifiedVocab) -> ExamplePools {
        let grid = grid_8x8();
        ExamplePools {
            text: (0..7)
                .map(|i| build_text(&format!("text {i}"), bpe, vocab, 128).unwrap())
                .collect(),
            t2i: (0..5)
                .map(|i| build_t2i(&format!("cap {i}"), &grid, bpe, vocab, 128).unwrap())
                .collect(),
            i2t: (0..3)
                .map(|i| build_i2t(&grid, &format!("cap {i}"), bpe, vocab, 128).unwrap())
                .collect(),
        }
    }

    #[test]
    fn mix_frequencies_converge_to_ratios() {
        let (bpe, vocab) = fixtures();
        let pools = pools(&bpe, &vocab);
        let stream = MixStream::new(&pools, MixSpec::new(1, 1, 1, 42).unwrap()).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..30_000 {
            match stream.draw(i).kind {
                TaskKind::Text => counts[0] += 1,
                TaskKind::T2i => counts[1] += 1,
                TaskKind::I2t => counts[2] += 1,
            }
        }
        for c in counts {
            let f = c as f64 / 30_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "frequency {f} strays from 1/3");
        }
    }

    #[test]
    fn degenerate_ratio_yields_single_kind() {
        let (bpe, vocab) = fixtures();
        let pools = pools(&bpe, &vocab);
        let stream = MixStream::new(&pools, MixSpec::new(1, 0, 0, 7).unwrap()).unwrap();
        assert!((0..1000).all(|i| stream.draw(i).kind == TaskKind::Text));
    }

    #[test]
    fn identical_spec_reproduces_stream() {
        let (bpe, vocab) = fixtures();
        let pools = pools(&bpe, &vocab);
        let spec = MixSpec::new(5, 4, 1, 11).unwrap();
        let a = MixStream::new(&pools, spec).unwrap();
        let b = MixStream::new(&pools, spec).unwrap();
        for i in 0..500 {
            assert_eq!(a.draw(i), b.draw(i));
        }
    }

    #[test]
    fn positive_ratio_with_empty_pool_errors() {
        let (bpe, vocab) = fixtures();
        let mut pools = pools(&bpe, &vocab);
        pools.i2t.clear();
        let err = MixStream::new(&pools, MixSpec::new(1, 1, 1, 0).unwrap()).unwrap_err();
        assert!(matches!(err, SequenceError::EmptyCorpus { kind: "i2t" }));
        assert!(MixStream::new(&pools, MixSpec::new(1, 1, 0, 0).unwrap()).is_ok());
        assert!(matches!(MixSpec::new(0, 0, 0, 0), Err(SequenceError::AllZeroRatios)));
    }

    #[test]
    fn batches_tile_the_stream() {
        let (bpe, vocab) = fixtures();
        let pools = pools(&bpe, &vocab);
        let stream = MixStream::new(&pools, MixSpec::new(1, 1, 1, 3).unwrap()).unwrap();
        let b0 = stream.batch(0, 4);
        let b1 = stream.batch(1, 4);
        assert_eq!(b0.len(), 4);
        assert_eq!(b0[3], stream.draw(3));
        assert_eq!(b1[0], stream.draw(4));
    }
}
