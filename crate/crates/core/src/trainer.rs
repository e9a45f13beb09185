//! Next-token training loop: warmup→cosine schedule, global-norm clipping,
//! AdamW, periodic validation split by target modality, JSONL metrics, and
//! checkpoint/resume.
//!
//! Every source of randomness is a pure function of (seed, step), so a run
//! restarted from a checkpoint at step `s` reproduces the original run's
//! metrics from `s` onward exactly — wall time excepted, which is why
//! determinism comparisons skip that one field.
//!
//! A non-finite training loss aborts immediately, leaving the last saved
//! checkpoint untouched on disk.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CkptError;
use crate::lm::{batch_from_examples, lm_logits, resolve_lm_vars, LmError, LmModel};
use crate::optim::{clip_global_norm, lr_schedule, AdamW};
use crate::params::ParamError;
use crate::sequence::{MixStream, SequenceExample};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::vocab::{Modality, UnifiedVocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("gradient norm {norm} exceeds clip bound {bound} after clipping at step {step}")]
    ClipViolated { step: u64, norm: f64, bound: f64 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub clip: f64,
    pub eval_every: u64,
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            peak_lr: 3e-4,
            warmup: 100,
            clip: 1.0,
            eval_every: 100,
            ckpt_every: 0,
        }
    }
}

/// One metrics line. Validation fields appear on eval steps only.
/// `wall_time_s` is elapsed real time and is the one field exempt from
/// determinism guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub step: u64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss_image: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_accuracy_image: Option<f64>,
    pub tokens_seen: u64,
    pub wall_time_s: f64,
}

impl MetricsPoint {
    /// Equality over every deterministic field (everything but wall time).
    pub fn same_measurements(&self, other: &Self) -> bool {
        self.step == other.step
            && self.train_loss == other.train_loss
            && self.val_loss_total == other.val_loss_total
            && self.val_loss_text == other.val_loss_text
            && self.val_loss_image == other.val_loss_image
            && self.token_accuracy_image == other.token_accuracy_image
            && self.tokens_seen == other.tokens_seen
    }
}

/// Validation metrics, split by what each weighted position's target is:
/// text/special targets versus image-code targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValReport {
    pub loss_total: f64,
    pub loss_text: f64,
    pub loss_image: f64,
    /// Argmax accuracy over image-target positions, with the argmax
    /// restricted to the image-code slice of the logits.
    pub token_accuracy_image: f64,
    pub weight_text: f64,
    pub weight_image: f64,
}

/// Forward-only evaluation. Losses are weighted means in f64; positions with
/// weight 0 contribute nothing.
pub fn validate_lm<T: Scalar>(
    model: &LmModel<T>,
    vocab: &UnifiedVocab,
    val: &[SequenceExample],
    batch_size: usize,
) -> Result<ValReport, TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let idx = resolve_lm_vars(model)?;
    let v = model.cfg.vocab as usize;
    let img_lo = vocab.image_base() as usize;
    let img_hi = img_lo + vocab.image_codes() as usize;
    let (mut sum_total, mut w_total) = (0.0f64, 0.0f64);
    let (mut sum_text, mut w_text) = (0.0f64, 0.0f64);
    let (mut sum_image, mut w_image) = (0.0f64, 0.0f64);
    let (mut img_hits, mut img_n) = (0u64, 0u64);

    let refs: Vec<&SequenceExample> = val.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = batch_from_examples(chunk)?;
        let mut tape = Tape::new();
        let vars = model.params.leaves(&mut tape);
        let logits = lm_logits(&mut tape, &vars, &idx, &model.cfg, &batch.ids, chunk.len())?;
        let rows = tape.value(logits).data();
        for (i, (&target, &w)) in batch.targets.iter().zip(&batch.weights).enumerate() {
            if w == 0 {
                continue;
            }
            let row = &rows[i * v..(i + 1) * v];
            let mut max = f64::NEG_INFINITY;
            for &x in row {
                max = max.max(x.as_f64());
            }
            let mut sum = 0.0f64;
            for &x in row {
                sum += (x.as_f64() - max).exp();
            }
            let ce = max + sum.ln() - row[target].as_f64();
            let w = w as f64;
            sum_total += w * ce;
            w_total += w;
            let is_image = matches!(vocab.modality_of(target as u32), Ok(Modality::Image));
            if is_image {
                sum_image += w * ce;
                w_image += w;
                img_n += 1;
                let mut best = img_lo;
                for j in img_lo + 1..img_hi.min(v) {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == target {
                    img_hits += 1;
                }
            } else {
                sum_text += w * ce;
                w_text += w;
            }
        }
    }
    Ok(ValReport {
        loss_total: if w_total > 0.0 { sum_total / w_total } else { 0.0 },
        loss_text: if w_text > 0.0 { sum_text / w_text } else { 0.0 },
        loss_image: if w_image > 0.0 { sum_image / w_image } else { 0.0 },
        token_accuracy_image: if img_n > 0 { img_hits as f64 / img_n as f64 } else { 0.0 },
        weight_text: w_text,
        weight_image: w_image,
    })
}

/// One optimization step on one batch; returns the training loss.
pub fn train_step<T: Scalar>(
    model: &mut LmModel<T>,
    opt: &mut AdamW<T>,
    examples: &[&SequenceExample],
    lr: f64,
    clip: f64,
    step: u64,
) -> Result<f64, TrainError> {
    let idx = resolve_lm_vars(model)?;
    let batch = batch_from_examples(examples)?;
    let mut tape = Tape::new();
    let vars = model.params.leaves(&mut tape);
    let logits = lm_logits(&mut tape, &vars, &idx, &model.cfg, &batch.ids, examples.len())?;
    let weights: Vec<T> = batch.weights.iter().map(|&w| T::from_f64(w as f64)).collect();
    let out = tape.softmax_cross_entropy(logits, &batch.targets, &weights)?;
    let loss = tape.value(out.loss).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    tape.backward(out.loss)?;
    let mut grads: Vec<Option<Tensor<T>>> =
        vars.iter().map(|&leaf| tape.grad(leaf).cloned()).collect();
    clip_global_norm(&mut grads, clip);
    let post = {
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            sq += g.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        sq.sqrt()
    };
    if post > clip * (1.0 + 1e-6) {
        return Err(TrainError::ClipViolated { step, norm: post, bound: clip });
    }
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}

pub struct TrainRun<'a, T: Scalar> {
    pub model: &'a mut LmModel<T>,
    pub opt: &'a mut AdamW<T>,
    pub vocab: &'a UnifiedVocab,
    pub stream: &'a MixStream<'a>,
    pub val: &'a [SequenceExample],
    pub cfg: TrainConfig,
    /// First step to execute (0 for a fresh run; the checkpoint's step when
    /// resuming).
    pub start_step: u64,
    /// Halt before this step while keeping `cfg.steps` as the schedule
    /// horizon — an interrupted run, not a shorter one. `None` runs to the
    /// end.
    pub stop_step: Option<u64>,
    pub metrics_path: Option<&'a Path>,
    pub ckpt_path: Option<&'a Path>,
}

/// Runs steps `[start_step, cfg.steps)`, returning every metrics line
/// produced. Metrics are appended to `metrics_path` as JSONL; checkpoints go
/// to `ckpt_path` every `ckpt_every` steps (always after the final step).
pub fn train_lm<T: Scalar>(run: TrainRun<'_, T>) -> Result<Vec<MetricsPoint>, TrainError> {
    let TrainRun {
        model,
        opt,
        vocab,
        stream,
        val,
        cfg,
        start_step,
        stop_step,
        metrics_path,
        ckpt_path,
    } = run;
    let end = stop_step.unwrap_or(cfg.steps).min(cfg.steps);
    let mut log = Vec::new();
    let mut writer = match metrics_path {
        Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let started = Instant::now();
    let mut tokens_seen = start_step * (cfg.batch_size as u64) * (vocab_context(model) as u64);

    for step in start_step..end {
        let lr = lr_schedule(step, cfg.steps, cfg.warmup, cfg.peak_lr);
        let examples = stream.batch(step, cfg.batch_size);
        let loss = train_step(model, opt, &examples, lr, cfg.clip, step)?;
        tokens_seen += (cfg.batch_size * examples[0].tokens.len()) as u64;

        let eval_now = !val.is_empty()
            && (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps);
        let report = if eval_now {
            Some(validate_lm(model, vocab, val, cfg.batch_size)?)
        } else {
            None
        };
        let point = MetricsPoint {
            step,
            train_loss: loss,
            val_loss_total: report.map(|r| r.loss_total),
            val_loss_text: report.map(|r| r.loss_text),
            val_loss_image: report.map(|r| r.loss_image),
            token_accuracy_image: report.map(|r| r.token_accuracy_image),
            tokens_seen,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&point).expect("metrics serialize");
            writeln!(w, "{line}")?;
        }
        log.push(point);

        if let Some(p) = ckpt_path {
            let done = step + 1 == end;
            if done || (cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0) {
                crate::checkpoint::save_lm_checkpoint(p, model, Some(opt), vocab, step + 1)?;
            }
        }
    }
    Ok(log)
}

fn vocab_context<T: Scalar>(model: &LmModel<T>) -> usize {
    model.cfg.context
}
