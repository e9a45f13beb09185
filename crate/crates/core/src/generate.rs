//! Autoregressive sampling for the three directions: text continuation,
//! exact-resolution text-to-image, and image captioning.
//!
//! Decoding is constrained per mode by masking logits to an allowed id set —
//! text modes exclude `[boi]` and every image id; image spans allow *only*
//! image ids. The `[boi]`/`[eoi]` brackets are forced, never sampled, so a
//! generated image is structurally valid for any parameters. Every emitted
//! token lands in the trace with its forced flag and chosen probability, and
//! a trace replays bit-identically under equal (params, inputs, config).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeVocab;
use crate::image::ImageU8;
use crate::lm::{lm_logits_last, resolve_lm_vars, LmError, LmIdxPub, LmModel};
use crate::tape::Tape;
use crate::tensor::Scalar;
use crate::vocab::{UnifiedVocab, VocabError};
use crate::vq::{vq_decode, vq_encode, CodeGrid, VqError, VqModel};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("temperature {0} is negative")]
    NegativeTemperature(f64),
    #[error("prompt needs {needed} tokens, context is {context}")]
    PromptTooLong { needed: usize, context: usize },
    #[error("{rows}x{cols} image needs {needed} tokens, context is {context}")]
    ResolutionExceedsContext { rows: usize, cols: usize, needed: usize, context: usize },
    #[error("empty image grid requested")]
    EmptyGrid,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// 0 means argmax decoding regardless of `top_k`.
    pub temperature: f64,
    /// Restrict sampling to the k most probable ids; 0 disables.
    pub top_k: usize,
    /// Budget for sampled text tokens (image spans have exact lengths).
    pub max_text_tokens: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 0, max_text_tokens: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub id: u32,
    /// Probability of this choice under the final (masked, tempered,
    /// truncated) distribution; 1.0 for forced tokens. Always in (0, 1].
    pub prob: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub trace: Vec<TraceStep>,
    /// Decoded text (text modes): the sampled text-modality ids, decoded.
    pub text: Option<String>,
    /// Sampled code grid (image mode).
    pub grid: Option<CodeGrid>,
    /// Decoded pixels (image mode).
    pub image: Option<ImageU8>,
}

impl GenerationResult {
    pub fn ids(&self) -> Vec<u32> {
        self.trace.iter().map(|s| s.id).collect()
    }

    pub fn sampled_ids(&self) -> Vec<u32> {
        self.trace.iter().filter(|s| !s.forced).map(|s| s.id).collect()
    }
}

/// Logit masks: the candidate id set for one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Allowed {
    /// Everything except `[boi]` and image ids (text decoding).
    TextMode,
    /// Image ids only (inside a forced bracket pair).
    ImageOnly,
}

fn is_allowed(vocab: &UnifiedVocab, mode: Allowed, id: u32) -> bool {
    let image = vocab.is_image(id);
    match mode {
        Allowed::TextMode => !image && id != vocab.boi(),
        Allowed::ImageOnly => image,
    }
}

/// One constrained sampling step over a logits row. Returns (id, prob).
fn sample_step<T: Scalar>(
    logits: &[T],
    vocab: &UnifiedVocab,
    mode: Allowed,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> (u32, f64) {
    let mut candidates: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(id, _)| is_allowed(vocab, mode, id as u32))
        .map(|(id, &l)| (id as u32, l.as_f64()))
        .collect();
    debug_assert!(!candidates.is_empty(), "mask never empties the vocabulary");

    if cfg.temperature == 0.0 || cfg.top_k == 1 {
        // Argmax over raw logits; the reported probability is the max entry
        // of the masked softmax at unit temperature.
        let best = candidates
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("non-empty candidates");
        let max = candidates[best].1;
        let denom: f64 = candidates.iter().map(|&(_, l)| (l - max).exp()).sum();
        return (candidates[best].0, 1.0 / denom);
    }

    // Tempered softmax over the allowed set.
    let max = candidates.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for c in &mut candidates {
        c.1 = ((c.1 - max) / cfg.temperature).exp();
        total += c.1;
    }
    for c in &mut candidates {
        c.1 /= total;
    }
    // Top-k truncation, then renormalize. Sort is descending by prob with
    // index ties broken low-first for determinism.
    if cfg.top_k > 0 && cfg.top_k < candidates.len() {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        candidates.truncate(cfg.top_k);
        let kept: f64 = candidates.iter().map(|c| c.1).sum();
        for c in &mut candidates {
            c.1 /= kept;
        }
    }
    let draw: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for &(id, p) in &candidates {
        acc += p;
        if draw < acc {
            return (id, p);
        }
    }
    let last = candidates.last().expect("non-empty candidates");
    (last.0, last.1)
}

/// Shared decoding loop state: a grown id sequence plus its trace.
struct Decoder<'a, T: Scalar> {
    model: &'a LmModel<T>,
    idx: LmIdxPub,
    vocab: &'a UnifiedVocab,
    cfg: SampleConfig,
    rng: ChaCha8Rng,
    ids: Vec<u32>,
    trace: Vec<TraceStep>,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    fn new(
        model: &'a LmModel<T>,
        vocab: &'a UnifiedVocab,
        cfg: SampleConfig,
    ) -> Result<Self, GenError> {
        if cfg.temperature < 0.0 || !cfg.temperature.is_finite() {
            return Err(GenError::NegativeTemperature(cfg.temperature));
        }
        Ok(Self {
            model,
            idx: resolve_lm_vars(model)?,
            vocab,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            ids: Vec::new(),
            trace: Vec::new(),
        })
    }

    fn force(&mut self, id: u32) {
        self.ids.push(id);
        self.trace.push(TraceStep { id, prob: 1.0, forced: true });
    }

    fn logits_row(&self) -> Result<Vec<T>, GenError> {
        let mut tape = Tape::new();
        let vars = self.model.params.leaves(&mut tape);
        let logits =
            lm_logits_last(&mut tape, &vars, &self.idx, &self.model.cfg, &self.ids, 1)?;
        Ok(tape.value(logits).data().to_vec())
    }

    fn sample(&mut self, mode: Allowed) -> Result<u32, GenError> {
        let row = self.logits_row()?;
        let (id, prob) = sample_step(&row, self.vocab, mode, &self.cfg, &mut self.rng);
        self.ids.push(id);
        self.trace.push(TraceStep { id, prob, forced: false });
        Ok(id)
    }

    fn room_left(&self) -> usize {
        self.model.cfg.context.saturating_sub(self.ids.len())
    }

    /// Samples text-mode tokens until `[eos]`, the token budget, or a full
    /// context window.
    fn run_text_tail(&mut self) -> Result<(), GenError> {
        for _ in 0..self.cfg.max_text_tokens {
            if self.room_left() == 0 {
                break;
            }
            let id = self.sample(Allowed::TextMode)?;
            if id == self.vocab.eos() {
                break;
            }
        }
        Ok(())
    }

    /// Decodes the sampled (non-forced) text-modality ids.
    fn sampled_text(&self, bpe: &BpeVocab) -> String {
        let text_ids: Vec<u32> = self
            .trace
            .iter()
            .filter(|s| !s.forced && self.vocab.is_text(s.id))
            .map(|s| s.id)
            .collect();
        let bytes = bpe.decode(&text_ids).expect("text ids decode");
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Continues a text prompt: `[bos] prompt …`, sampling with `[boi]` and all
/// image ids masked out, until `[eos]` or the budget.
pub fn generate_text<T: Scalar>(
    model: &LmModel<T>,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    prompt: &str,
    cfg: SampleConfig,
) -> Result<GenerationResult, GenError> {
    let mut d = Decoder::new(model, vocab, cfg)?;
    let prompt_ids = bpe.encode_str(prompt);
    let needed = prompt_ids.len() + 1;
    if needed >= model.cfg.context {
        return Err(GenError::PromptTooLong { needed, context: model.cfg.context });
    }
    d.force(vocab.bos());
    for id in prompt_ids {
        d.force(id);
    }
    d.run_text_tail()?;
    let text = d.sampled_text(bpe);
    Ok(GenerationResult { trace: d.trace, text: Some(text), grid: None, image: None })
}

/// The resolution suffix is part of the training format; re-exported here so
/// callers build prompts the way the model saw them.
pub use crate::sequence::resolution_suffix;

/// Renders a caption at an exact resolution: the prompt and `[boi]` are
/// forced, then exactly `rows·cols` steps sample image ids only, then
/// `[eoi]` is forced and the grid decodes through the image tokenizer.
pub fn generate_image<T: Scalar>(
    model: &LmModel<T>,
    vq: &VqModel<T>,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    caption: &str,
    rows: usize,
    cols: usize,
    cfg: SampleConfig,
) -> Result<GenerationResult, GenError> {
    if rows == 0 || cols == 0 {
        return Err(GenError::EmptyGrid);
    }
    let prompt = format!("{caption}{}", resolution_suffix(rows, cols));
    let prompt_ids = bpe.encode_str(&prompt);
    // [bos] prompt [boi] codes [eoi], plus the [eos] the format reserves.
    let needed = prompt_ids.len() + rows * cols + 4;
    if needed > model.cfg.context {
        return Err(GenError::ResolutionExceedsContext {
            rows,
            cols,
            needed,
            context: model.cfg.context,
        });
    }
    let mut d = Decoder::new(model, vocab, cfg)?;
    d.force(vocab.bos());
    for id in prompt_ids {
        d.force(id);
    }
    d.force(vocab.boi());
    let mut codes = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let id = d.sample(Allowed::ImageOnly)?;
        codes.push(vocab.code_of_image_id(id)?);
    }
    d.force(vocab.eoi());
    let grid = CodeGrid::new(rows, cols, codes)?;
    let image = vq_decode(vq, &grid)?;
    Ok(GenerationResult { trace: d.trace, text: None, grid: Some(grid), image: Some(image) })
}

/// Captions an image: `[bos][boi] encode(image) [eoi]` forced, then text
/// sampling with image ids and `[boi]` masked out.
pub fn caption_image<T: Scalar>(
    model: &LmModel<T>,
    vq: &VqModel<T>,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    image: &ImageU8,
    cfg: SampleConfig,
) -> Result<GenerationResult, GenError> {
    let grid = vq_encode(vq, image)?;
    let needed = grid.rows() * grid.cols() + 3;
    if needed >= model.cfg.context {
        return Err(GenError::PromptTooLong { needed, context: model.cfg.context });
    }
    let mut d = Decoder::new(model, vocab, cfg)?;
    d.force(vocab.bos());
    d.force(vocab.boi());
    for &code in grid.indices() {
        d.force(vocab.image_id_of_code(code)?);
    }
    d.force(vocab.eoi());
    d.run_text_tail()?;
    let text = d.sampled_text(bpe);
    Ok(GenerationResult { trace: d.trace, text: Some(text), grid: Some(grid), image: None })
}
