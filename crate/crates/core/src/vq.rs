//! VQ image tokenizer: convolutional encoder → nearest-codebook
//! quantization with straight-through gradients → mirrored decoder.
//!
//! Desk geometry: 32×32×3 images, two stride-2 encoder stages (total
//! stride 4), an 8×8 latent grid of D-vectors, K codes. Codes are emitted
//! in raster order, which is the order they enter token sequences. The
//! codebook trains either by EMA cluster updates (default) or by a
//! backpropagated codebook loss; commit loss always pulls the encoder
//! toward its assigned codes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageU8;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamMap;
use crate::seeding::mix_seed;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Two stride-2 stages fix the spatial stride.
pub const VQ_STRIDE: usize = 4;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("image is {got_h}x{got_w}, tokenizer expects {want}x{want}")]
    Geometry { got_h: usize, got_w: usize, want: usize },
    #[error("code grid {rows}x{cols} needs {need} indices, got {got}")]
    GridShape { rows: usize, cols: usize, need: usize, got: usize },
    #[error("code index {index} out of range for {codes} codes")]
    CodeOutOfRange { index: u32, codes: usize },
    #[error("non-finite latents entering quantization")]
    NonFiniteLatents,
    #[error("non-finite loss at step {step}: recon {recon}, commit {commit}, codebook {codebook}")]
    NonFiniteLoss { step: u64, recon: f64, commit: f64, codebook: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("codebook usage sums to zero")]
    ZeroUsage,
    #[error("negative usage count at code {0}")]
    NegativeUsage(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Param(#[from] crate::params::ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub image_size: usize,
    pub channels: usize,
    /// K: codebook entries.
    pub codes: usize,
    /// D: latent/code dimension.
    pub code_dim: usize,
    /// First encoder width; the bottleneck stage uses twice this.
    pub hidden: usize,
    /// Commit-loss weight β.
    pub beta: f64,
    /// `Some(decay)` → EMA codebook updates; `None` → backpropagated
    /// codebook loss.
    pub ema_decay: Option<f64>,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            codes: 256,
            code_dim: 16,
            hidden: 32,
            beta: 0.25,
            ema_decay: Some(0.99),
        }
    }
}

impl VqConfig {
    pub fn grid_dim(&self) -> usize {
        self.image_size / VQ_STRIDE
    }

    pub fn cells(&self) -> usize {
        self.grid_dim() * self.grid_dim()
    }

    pub fn validate(&self) -> Result<(), VqError> {
        if self.image_size == 0 || self.image_size % VQ_STRIDE != 0 {
            return Err(VqError::Config(format!(
                "image_size {} not divisible by stride {VQ_STRIDE}",
                self.image_size
            )));
        }
        if self.codes < 2 {
            return Err(VqError::Config(format!("codebook needs K >= 2, got {}", self.codes)));
        }
        if self.channels == 0 || self.code_dim == 0 || self.hidden == 0 {
            return Err(VqError::Config("zero-width layer".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(VqError::Config(format!("ema decay {d} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Raster-order grid of code indices; every index must be < K for the
/// codebook it is used with (checked at use sites).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    rows: usize,
    cols: usize,
    indices: Vec<u32>,
}

impl CodeGrid {
    pub fn new(rows: usize, cols: usize, indices: Vec<u32>) -> Result<Self, VqError> {
        if rows == 0 || cols == 0 || indices.len() != rows * cols {
            return Err(VqError::GridShape { rows, cols, need: rows * cols, got: indices.len() });
        }
        Ok(Self { rows, cols, indices })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn validate_codes(&self, codes: usize) -> Result<(), VqError> {
        for &i in &self.indices {
            if i as usize >= codes {
                return Err(VqError::CodeOutOfRange { index: i, codes });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VqModel<T: Scalar> {
    pub cfg: VqConfig,
    pub params: ParamMap<T>,
}

/// Resolved entry indices of the tokenizer's tensors, aligned with
/// `ParamMap` order so `leaves()` handles can be indexed directly.
struct VqIdx {
    e1w: usize, e1b: usize, e2w: usize, e2b: usize, e3w: usize, e3b: usize,
    d1w: usize, d1b: usize, t2w: usize, t2b: usize, t3w: usize, t3b: usize,
    d4w: usize, d4b: usize, codebook: usize,
}

impl VqIdx {
    fn resolve<T: Scalar>(p: &ParamMap<T>) -> Result<Self, VqError> {
        let at = |n: &str| p.index_of(n).ok_or_else(|| VqError::Config(format!("missing tensor {n}")));
        Ok(Self {
            e1w: at("enc.c1.w")?, e1b: at("enc.c1.b")?,
            e2w: at("enc.c2.w")?, e2b: at("enc.c2.b")?,
            e3w: at("enc.c3.w")?, e3b: at("enc.c3.b")?,
            d1w: at("dec.c1.w")?, d1b: at("dec.c1.b")?,
            t2w: at("dec.t2.w")?, t2b: at("dec.t2.b")?,
            t3w: at("dec.t3.w")?, t3b: at("dec.t3.b")?,
            d4w: at("dec.c4.w")?, d4b: at("dec.c4.b")?,
            codebook: at("codebook")?,
        })
    }
}

/// Fresh tokenizer with He-initialized convolutions. In EMA mode the
/// codebook is a non-trainable entry and carries cluster buffers
/// initialized to reproduce the codebook exactly (count 1, sum = vector).
pub fn init_vq<T: Scalar>(cfg: VqConfig, seed: u64) -> Result<VqModel<T>, VqError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, h, h2) = (cfg.channels, cfg.code_dim, cfg.hidden, 2 * cfg.hidden);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let mut p = ParamMap::new();
    let conv = |p: &mut ParamMap<T>, name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha8Rng| {
        p.insert(&format!("{name}.w"), Tensor::randn(&[co, ci, k, k], he(ci * k * k), rng), true)?;
        p.insert(&format!("{name}.b"), Tensor::zeros(&[co]), true)?;
        Ok::<(), VqError>(())
    };
    conv(&mut p, "enc.c1", h, c, 3, &mut rng)?;
    conv(&mut p, "enc.c2", h2, h, 3, &mut rng)?;
    conv(&mut p, "enc.c3", d, h2, 3, &mut rng)?;
    conv(&mut p, "dec.c1", h2, d, 3, &mut rng)?;
    // Transposed kernels are [c_in, c_out, kh, kw].
    p.insert("dec.t2.w", Tensor::randn(&[h2, h, 4, 4], he(h2 * 16), &mut rng), true)?;
    p.insert("dec.t2.b", Tensor::zeros(&[h]), true)?;
    p.insert("dec.t3.w", Tensor::randn(&[h, h, 4, 4], he(h * 16), &mut rng), true)?;
    p.insert("dec.t3.b", Tensor::zeros(&[h]), true)?;
    conv(&mut p, "dec.c4", c, h, 3, &mut rng)?;
    let codebook: Tensor<T> = Tensor::randn(&[cfg.codes, d], 0.1, &mut rng);
    let ema = cfg.ema_decay.is_some();
    p.insert("codebook", codebook.clone(), !ema)?;
    if ema {
        p.insert("ema_count", Tensor::full(&[cfg.codes], T::one()), false)?;
        p.insert("ema_sum", codebook, false)?;
    }
    p.insert("usage", Tensor::zeros(&[cfg.codes]), false)?;
    Ok(VqModel { cfg, params: p })
}

/// Argmin-L2 code for one latent row; ties break to the smallest id.
pub fn nearest_code<T: Scalar>(latent: &[T], codebook: &Tensor<T>) -> usize {
    let d = codebook.shape()[1];
    debug_assert_eq!(latent.len(), d);
    let mut best = 0usize;
    let mut best_d = T::infinity();
    for (k, row) in codebook.data().chunks_exact(d).enumerate() {
        let mut acc = T::zero();
        for j in 0..d {
            let diff = latent[j] - row[j];
            acc += diff * diff;
        }
        if acc < best_d {
            best_d = acc;
            best = k;
        }
    }
    best
}

pub struct Quantized {
    pub grid: CodeGrid,
    /// Forward = selected code vectors, backward = identity to the latents.
    pub quantized: Var,
    /// mean over cells of ‖latent − stopgrad(code)‖².
    pub commit: Var,
    /// mean over cells of ‖stopgrad(latent) − code‖²; a constant in EMA mode.
    pub codebook_loss: Var,
    pub ids: Vec<usize>,
}

/// Nearest-codebook quantization of a `[cells, D]` latent grid.
/// `codebook_var` present routes the codebook-loss gradient into the table
/// (loss mode); absent, the loss is reported as a constant (EMA mode).
pub fn quantize<T: Scalar>(
    tape: &mut Tape<T>,
    latents: Var,
    rows: usize,
    cols: usize,
    codebook: &Tensor<T>,
    codebook_var: Option<Var>,
) -> Result<Quantized, VqError> {
    let lv = tape.value(latents).clone();
    let d = codebook.shape()[1];
    if lv.rank() != 2 || lv.shape()[0] != rows * cols || lv.shape()[1] != d {
        return Err(TensorError::ShapeMismatch {
            op: "quantize",
            lhs: lv.shape().to_vec(),
            rhs: vec![rows * cols, d],
        }
        .into());
    }
    if !lv.is_finite() {
        return Err(VqError::NonFiniteLatents);
    }
    let cells = rows * cols;
    let ids: Vec<usize> = lv.data().chunks_exact(d).map(|row| nearest_code(row, codebook)).collect();
    let mut codes = Tensor::zeros(&[cells, d]);
    for (i, &k) in ids.iter().enumerate() {
        codes.data_mut()[i * d..(i + 1) * d].copy_from_slice(&codebook.data()[k * d..(k + 1) * d]);
    }

    let quantized = tape.straight_through(latents, codes.clone())?;
    let inv_cells = T::from_f64(1.0 / cells as f64);

    let neg_codes = tape.constant(codes.map(|v| -v));
    let diff = tape.add(latents, neg_codes)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq);
    let commit = tape.scale(sum, inv_cells);

    let codebook_loss = match codebook_var {
        Some(cb) => {
            let gathered = tape.gather_rows(cb, &ids)?;
            let neg_lat = tape.constant(lv.map(|v| -v));
            let diff = tape.add(gathered, neg_lat)?;
            let sq = tape.mul(diff, diff)?;
            let sum = tape.sum_all(sq);
            tape.scale(sum, inv_cells)
        }
        // Numerically identical to commit; only the gradient routing differs.
        None => tape.constant(Tensor::scalar(tape.value(commit).item()?)),
    };

    let grid = CodeGrid::new(rows, cols, ids.iter().map(|&i| i as u32).collect())?;
    Ok(Quantized { grid, quantized, commit, codebook_loss, ids })
}

/// Encoder: image `[c, s, s]` → latent rows `[cells, D]` in raster order.
pub fn encoder_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &VqIdxPub,
    x: Var,
) -> Result<Var, VqError> {
    let i = &idx.0;
    let c1 = tape.conv2d(x, vars[i.e1w], vars[i.e1b], 2, 1)?;
    let a1 = tape.silu(c1);
    let c2 = tape.conv2d(a1, vars[i.e2w], vars[i.e2b], 2, 1)?;
    let a2 = tape.silu(c2);
    let c3 = tape.conv2d(a2, vars[i.e3w], vars[i.e3b], 1, 1)?;
    let shape = tape.value(c3).shape().to_vec();
    let (d, cells) = (shape[0], shape[1] * shape[2]);
    let r = tape.reshape(c3, &[d, cells])?;
    Ok(tape.transpose(r)?)
}

/// Decoder: code rows `[rows*cols, D]` → image `[c, rows*4, cols*4]`,
/// pre-clamp.
pub fn decoder_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    idx: &VqIdxPub,
    codes: Var,
    rows: usize,
    cols: usize,
) -> Result<Var, VqError> {
    let i = &idx.0;
    let t = tape.transpose(codes)?;
    let d = tape.value(t).shape()[0];
    let grid = tape.reshape(t, &[d, rows, cols])?;
    let c1 = tape.conv2d(grid, vars[i.d1w], vars[i.d1b], 1, 1)?;
    let a1 = tape.silu(c1);
    let u2 = tape.conv2d_transpose(a1, vars[i.t2w], vars[i.t2b], 2, 1)?;
    let a2 = tape.silu(u2);
    let u3 = tape.conv2d_transpose(a2, vars[i.t3w], vars[i.t3b], 2, 1)?;
    let a3 = tape.silu(u3);
    Ok(tape.conv2d(a3, vars[i.d4w], vars[i.d4b], 1, 1)?)
}

/// Opaque resolved-index handle for the graph builders.
pub struct VqIdxPub(VqIdx);

pub fn resolve_vq_vars<T: Scalar>(model: &VqModel<T>) -> Result<VqIdxPub, VqError> {
    Ok(VqIdxPub(VqIdx::resolve(&model.params)?))
}

fn check_geometry<T: Scalar>(model: &VqModel<T>, img: &ImageU8) -> Result<(), VqError> {
    if img.height() != model.cfg.image_size || img.width() != model.cfg.image_size {
        return Err(VqError::Geometry {
            got_h: img.height(),
            got_w: img.width(),
            want: model.cfg.image_size,
        });
    }
    Ok(())
}

pub fn vq_encode<T: Scalar>(model: &VqModel<T>, img: &ImageU8) -> Result<CodeGrid, VqError> {
    check_geometry(model, img)?;
    let idx = resolve_vq_vars(model)?;
    let mut tape = Tape::new();
    let vars = model.params.leaves(&mut tape);
    let x = tape.constant(img.to_tensor());
    let latents = encoder_graph(&mut tape, &vars, &idx, x)?;
    let g = model.cfg.grid_dim();
    let q = quantize(&mut tape, latents, g, g, model.params.get("codebook")?, None)?;
    Ok(q.grid)
}

/// Codebook lookup + decoder + clamp to [0, 1]. The decoder is fully
/// convolutional, so any grid shape decodes to `(4·rows)×(4·cols)` pixels.
pub fn vq_decode<T: Scalar>(model: &VqModel<T>, grid: &CodeGrid) -> Result<ImageU8, VqError> {
    let codebook = model.params.get("codebook")?;
    grid.validate_codes(model.cfg.codes)?;
    let d = model.cfg.code_dim;
    let cells = grid.rows() * grid.cols();
    let mut codes = Tensor::zeros(&[cells, d]);
    for (i, &k) in grid.indices().iter().enumerate() {
        codes.data_mut()[i * d..(i + 1) * d]
            .copy_from_slice(&codebook.data()[k as usize * d..(k as usize + 1) * d]);
    }
    let idx = resolve_vq_vars(model)?;
    let mut tape = Tape::new();
    let vars = model.params.leaves(&mut tape);
    let c = tape.constant(codes);
    let out = decoder_graph(&mut tape, &vars, &idx, c, grid.rows(), grid.cols())?;
    let clamped = tape.value(out).map(|v| {
        let one = T::one();
        if v < T::zero() { T::zero() } else if v > one { one } else { v }
    });
    Ok(ImageU8::from_tensor(&clamped)?)
}

pub fn reconstruction_psnr<T: Scalar>(model: &VqModel<T>, img: &ImageU8) -> Result<f64, VqError> {
    let rec = vq_decode(model, &vq_encode(model, img)?)?;
    Ok(crate::image::psnr(img, &rec)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    pub recon: f64,
    pub commit: f64,
    pub codebook: f64,
    pub total: f64,
}

/// One optimizer step over a batch. Loss = recon + β·commit (+ codebook
/// loss when backpropagated); in EMA mode the codebook instead moves by
/// decayed cluster means after the gradient step, and dead codes stay put.
pub fn vq_train_step<T: Scalar>(
    model: &mut VqModel<T>,
    batch: &[&ImageU8],
    opt: &mut AdamW<T>,
    lr: f64,
    step: u64,
) -> Result<VqLosses, VqError> {
    if batch.is_empty() {
        return Err(VqError::EmptyBatch);
    }
    for img in batch {
        check_geometry(model, img)?;
    }
    let idx = resolve_vq_vars(model)?;
    let ema = model.cfg.ema_decay;
    let g = model.cfg.grid_dim();
    let beta = T::from_f64(model.cfg.beta);
    let inv_b = T::from_f64(1.0 / batch.len() as f64);

    let mut tape = Tape::new();
    let vars = model.params.leaves(&mut tape);
    let cb_var = if ema.is_none() { Some(vars[idx.0.codebook]) } else { None };
    let codebook = model.params.get("codebook")?.clone();

    let (mut recon_s, mut commit_s, mut cb_s): (Option<Var>, Option<Var>, Option<Var>) = (None, None, None);
    let mut latents_all: Vec<Tensor<T>> = Vec::with_capacity(batch.len());
    let mut ids_all: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    for img in batch {
        let xt: Tensor<T> = img.to_tensor();
        let x = tape.constant(xt.clone());
        let latents = encoder_graph(&mut tape, &vars, &idx, x)?;
        latents_all.push(tape.value(latents).clone());
        let q = quantize(&mut tape, latents, g, g, &codebook, cb_var)?;
        ids_all.push(q.ids);
        let xhat = decoder_graph(&mut tape, &vars, &idx, q.quantized, g, g)?;
        let neg_x = tape.constant(xt.map(|v| -v));
        let diff = tape.add(xhat, neg_x)?;
        let sq = tape.mul(diff, diff)?;
        let recon_i = tape.mean_all(sq);
        let join = |tape: &mut Tape<T>, acc: Option<Var>, v: Var| match acc {
            None => Ok::<_, TensorError>(v),
            Some(a) => tape.add(a, v),
        };
        recon_s = Some(join(&mut tape, recon_s, recon_i)?);
        commit_s = Some(join(&mut tape, commit_s, q.commit)?);
        cb_s = Some(join(&mut tape, cb_s, q.codebook_loss)?);
    }
    let recon = tape.scale(recon_s.expect("non-empty batch"), inv_b);
    let commit = tape.scale(commit_s.expect("non-empty batch"), inv_b);
    let cb_loss = tape.scale(cb_s.expect("non-empty batch"), inv_b);
    let commit_w = tape.scale(commit, beta);
    let mut total = tape.add(recon, commit_w)?;
    if ema.is_none() {
        total = tape.add(total, cb_loss)?;
    }

    let losses = VqLosses {
        recon: tape.value(recon).item()?.as_f64(),
        commit: tape.value(commit).item()?.as_f64(),
        codebook: tape.value(cb_loss).item()?.as_f64(),
        total: tape.value(total).item()?.as_f64(),
    };
    if !losses.total.is_finite() || !losses.codebook.is_finite() {
        return Err(VqError::NonFiniteLoss {
            step,
            recon: losses.recon,
            commit: losses.commit,
            codebook: losses.codebook,
        });
    }

    tape.backward(total)?;
    let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
    opt.step(&mut model.params, &grads, lr)?;

    // Usage counts and EMA cluster update from this batch's assignments.
    let k = model.cfg.codes;
    let d = model.cfg.code_dim;
    let mut counts = vec![0.0f64; k];
    let mut sums: Vec<f64> = vec![0.0; k * d];
    for (lat, ids) in latents_all.iter().zip(&ids_all) {
        for (cell, &code) in ids.iter().enumerate() {
            counts[code] += 1.0;
            for j in 0..d {
                sums[code * d + j] += lat.data()[cell * d + j].as_f64();
            }
        }
    }
    {
        let usage = model.params.get_mut("usage")?;
        for (u, &c) in usage.data_mut().iter_mut().zip(&counts) {
            *u += T::from_f64(c);
        }
    }
    if let Some(decay) = ema {
        // decay == 1.0 must leave the codebook bit-identical, so skip all
        // arithmetic instead of trusting x·1 + y·0 to round-trip.
        if decay < 1.0 {
            let decay_t = T::from_f64(decay);
            let one_m = T::from_f64(1.0 - decay);
            {
                let ema_count = model.params.get_mut("ema_count")?;
                for (e, &c) in ema_count.data_mut().iter_mut().zip(&counts) {
                    *e = decay_t * *e + one_m * T::from_f64(c);
                }
            }
            {
                let ema_sum = model.params.get_mut("ema_sum")?;
                for (e, &s) in ema_sum.data_mut().iter_mut().zip(&sums) {
                    *e = decay_t * *e + one_m * T::from_f64(s);
                }
            }
            let count_snapshot: Vec<T> = model.params.get("ema_count")?.data().to_vec();
            let sum_snapshot: Vec<T> = model.params.get("ema_sum")?.data().to_vec();
            let cb = model.params.get_mut("codebook")?;
            let floor = T::from_f64(1e-3);
            for code in 0..k {
                if count_snapshot[code] >= floor {
                    for j in 0..d {
                        cb.data_mut()[code * d + j] = sum_snapshot[code * d + j] / count_snapshot[code];
                    }
                }
            }
        }
    }
    Ok(losses)
}

/// exp(entropy) of the normalized usage distribution, in [1, K].
pub fn codebook_perplexity(usage: &[f64]) -> Result<f64, VqError> {
    if let Some(i) = usage.iter().position(|&u| u < 0.0) {
        return Err(VqError::NegativeUsage(i));
    }
    let total: f64 = usage.iter().sum();
    if total <= 0.0 {
        return Err(VqError::ZeroUsage);
    }
    let entropy: f64 = usage
        .iter()
        .filter(|&&u| u > 0.0)
        .map(|&u| {
            let p = u / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 2e-3, warmup: 50, seed: 0, eval_every: 250 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLogPoint {
    pub step: u64,
    pub recon: f64,
    pub commit: f64,
    pub codebook: f64,
    pub perplexity: f64,
    /// Mean PSNR over the held-out set; present at eval cadence.
    pub eval_psnr: Option<f64>,
}

/// Full tokenizer training loop. Batches are drawn with replacement using a
/// per-step seed, so the trajectory is a pure function of (corpus, config).
pub fn vq_train<T: Scalar>(
    model: &mut VqModel<T>,
    train: &[ImageU8],
    held_out: &[ImageU8],
    tc: &VqTrainConfig,
) -> Result<Vec<VqLogPoint>, VqError> {
    if train.is_empty() {
        return Err(VqError::EmptyBatch);
    }
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let mut log = Vec::new();
    for step in 0..tc.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, step));
        let batch: Vec<&ImageU8> = (0..tc.batch_size)
            .map(|_| &train[(rng.next_u64() % train.len() as u64) as usize])
            .collect();
        let lr = crate::optim::lr_schedule(step, tc.steps, tc.warmup, tc.lr);
        let losses = vq_train_step(model, &batch, &mut opt, lr, step)?;
        let last = step + 1 == tc.steps;
        if tc.eval_every > 0 && (step % tc.eval_every == 0 || last) {
            let usage: Vec<f64> = model.params.get("usage")?.data().iter().map(|v| v.as_f64()).collect();
            let perplexity = codebook_perplexity(&usage).unwrap_or(1.0);
            let eval_psnr = if held_out.is_empty() {
                None
            } else {
                let mut acc = 0.0;
                for img in held_out {
                    acc += reconstruction_psnr(model, img)?;
                }
                Some(acc / held_out.len() as f64)
            };
            log.push(VqLogPoint {
                step,
                recon: losses.recon,
                commit: losses.commit,
                codebook: losses.codebook,
                perplexity,
                eval_psnr,
            });
        }
    }
    Ok(log)
}

use rand::RngCore;
