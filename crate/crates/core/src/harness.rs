//! Experiment harness: builds one shared synthetic world (corpus, text
//! tokenizer, trained image codec, example pools), trains ladder models
//! under different data regimes with identical budgets, and produces the
//! scaling, trade-off, and mutual-boost tables.
//!
//! Fairness invariants: every run in a sweep shares the data seed, the
//! validation set (checked by hash), and the training configuration; only
//! the mixing ratios differ. Model init seeds depend on size, not regime.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analyze::{caption_fact_accuracy, consistency_score, EvalError};
use crate::bpe::{BpeError, BpeVocab};
use crate::data::{hex, DataError, Dataset};
use crate::frechet::{frechet_feature_distance, FrechetError, FEATURE_DIM};
use crate::generate::{caption_image, generate_image, GenError, SampleConfig};
use crate::image::ImageU8;
use crate::lm::{init_lm, LmConfig, LmError, LmModel, LADDER};
use crate::optim::{AdamW, AdamWConfig};
use crate::scene::{synth_corpus, synth_text, SceneRecord};
use crate::seeding::mix_seed;
use crate::sequence::{
    build_i2t, build_t2i, build_text, ExamplePools, MixSpec, MixStream, PoolBuilder,
    SequenceError, SequenceExample, TaskKind,
};
use crate::trainer::{train_lm, MetricsPoint, TrainConfig, TrainError, TrainRun};
use crate::vocab::{UnifiedVocab, VocabError};
use crate::vq::{init_vq, vq_decode, vq_encode, vq_train, CodeGrid, VqConfig, VqError, VqModel, VqTrainConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("bad harness config: {0}")]
    Config(String),
    #[error("missing sweep runs: {0}")]
    MissingRuns(String),
    #[error("run {run} lacks metric {metric}")]
    MissingMetric { run: String, metric: &'static str },
    #[error(
        "mutual-boost budgets must be equal: baseline={baseline} add-t2i={add_t2i} add-i2t={add_i2t}"
    )]
    UnequalBudgets { baseline: u64, add_t2i: u64, add_i2t: u64 },
    #[error("run {run} aborted: {reason}")]
    RunFailed { run: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Frechet(#[from] FrechetError),
}

/// Data regime for one training run: which task mix the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    TextOnly,
    T2iOnly,
    Mixed,
}

pub const REGIMES: [Regime; 3] = [Regime::TextOnly, Regime::T2iOnly, Regime::Mixed];

impl Regime {
    /// (text, t2i, i2t) mixing ratios.
    pub fn ratios(self) -> (u32, u32, u32) {
        match self {
            Regime::TextOnly => (1, 0, 0),
            Regime::T2iOnly => (0, 1, 0),
            Regime::Mixed => (5, 4, 1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::TextOnly => "text-only",
            Regime::T2iOnly => "t2i-only",
            Regime::Mixed => "mixed",
        }
    }

    /// Whether image generation metrics are defined for this regime.
    pub fn trains_t2i(self) -> bool {
        self.ratios().1 > 0
    }

    /// Whether captioning metrics are defined for this regime.
    pub fn trains_i2t(self) -> bool {
        self.ratios().2 > 0
    }
}

/// Inputs for [`build_world`]. Validation items are held out from the end
/// of the synthesized corpus, so train/val membership is seed-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_scenes: usize,
    pub n_text: usize,
    pub val_scenes: usize,
    pub val_text: usize,
    pub bpe_size: usize,
    pub context: usize,
    pub seed: u64,
    pub vq_cfg: VqConfig,
    pub vq_train: VqTrainConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2048,
            n_text: 2048,
            val_scenes: 192,
            val_text: 128,
            bpe_size: 512,
            context: 256,
            seed: 0,
            // A wider, longer-trained codec than the module defaults: the
            // experiments need near-lossless round-trips so the codec stops
            // being the ceiling on generation quality.
            vq_cfg: VqConfig { hidden: 48, ..VqConfig::default() },
            vq_train: VqTrainConfig { steps: 3000, ..VqTrainConfig::default() },
        }
    }
}

/// Everything the runs share: tokenizers, the trained codec, tokenized
/// pools, and the held-out scenes used for generation-side evaluation.
pub struct ExperimentWorld {
    pub bpe: BpeVocab,
    pub vq: VqModel<f32>,
    pub vocab: UnifiedVocab,
    pub context: usize,
    pub pools: ExamplePools,
    pub val: Vec<SequenceExample>,
    /// SHA-256 over the validation token/mask streams; equal hashes mean
    /// two runs scored against the same split.
    pub val_hash: String,
    /// Held-out scenes: prompts for generation, targets for captioning,
    /// and the reference set for the feature-distance metric.
    pub eval_scenes: Vec<SceneRecord>,
    pub skipped_overlong: usize,
    pub vq_log: Vec<crate::vq::VqLogPoint>,
}

/// SHA-256 over kind/token/mask streams: two example sets hash equal iff a
/// model would be scored on identical data.
pub fn hash_examples(examples: &[SequenceExample]) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update([ex.kind.as_str().len() as u8]);
        h.update(ex.kind.as_str().as_bytes());
        for &t in &ex.tokens {
            h.update(t.to_le_bytes());
        }
        h.update(&ex.loss_mask);
    }
    hex(&h.finalize())
}

/// Synthesizes the corpus, trains the text tokenizer and the image codec on
/// the training split only, and tokenizes both splits.
pub fn build_world(cfg: &WorldConfig) -> Result<ExperimentWorld, HarnessError> {
    if cfg.val_scenes == 0 || cfg.val_scenes >= cfg.n_scenes {
        return Err(HarnessError::Config(format!(
            "val_scenes {} must be in 1..{}",
            cfg.val_scenes, cfg.n_scenes
        )));
    }
    if cfg.val_text == 0 || cfg.val_text >= cfg.n_text {
        return Err(HarnessError::Config(format!(
            "val_text {} must be in 1..{}",
            cfg.val_text, cfg.n_text
        )));
    }
    let scenes = synth_corpus(cfg.n_scenes, cfg.seed);
    let texts = synth_text(cfg.n_text, mix_seed(cfg.seed, 1));
    let (train_scenes, val_scenes) = scenes.split_at(cfg.n_scenes - cfg.val_scenes);
    let (train_texts, val_texts) = texts.split_at(cfg.n_text - cfg.val_text);

    let bpe_corpus = train_texts
        .iter()
        .map(String::as_bytes)
        .chain(train_scenes.iter().map(|r| r.caption.as_bytes()));
    let bpe = BpeVocab::train(bpe_corpus, cfg.bpe_size)?;

    let mut vq = init_vq::<f32>(cfg.vq_cfg, mix_seed(cfg.seed, 2))?;
    let train_imgs: Vec<ImageU8> = train_scenes.iter().map(|r| r.image.clone()).collect();
    let val_imgs: Vec<ImageU8> = val_scenes.iter().map(|r| r.image.clone()).collect();
    let vq_log = vq_train(&mut vq, &train_imgs, &val_imgs, &cfg.vq_train)?;

    let vocab = UnifiedVocab::new(bpe.size() as u32, cfg.vq_cfg.codes as u32)?;

    let mut pools = ExamplePools::default();
    let mut pb = PoolBuilder::new();
    for t in train_texts {
        pb.push(&mut pools.text, build_text(t, &bpe, &vocab, cfg.context))?;
    }
    for r in train_scenes {
        let grid = vq_encode(&vq, &r.image)?;
        pb.push(&mut pools.t2i, build_t2i(&r.caption, &grid, &bpe, &vocab, cfg.context))?;
        pb.push(&mut pools.i2t, build_i2t(&grid, &r.caption, &bpe, &vocab, cfg.context))?;
    }
    let mut val = Vec::new();
    for t in val_texts {
        pb.push(&mut val, build_text(t, &bpe, &vocab, cfg.context))?;
    }
    for r in val_scenes {
        let grid = vq_encode(&vq, &r.image)?;
        pb.push(&mut val, build_t2i(&r.caption, &grid, &bpe, &vocab, cfg.context))?;
        pb.push(&mut val, build_i2t(&grid, &r.caption, &bpe, &vocab, cfg.context))?;
    }
    let val_hash = hash_examples(&val);

    Ok(ExperimentWorld {
        bpe,
        vq,
        vocab,
        context: cfg.context,
        pools,
        val,
        val_hash,
        eval_scenes: val_scenes.to_vec(),
        skipped_overlong: pb.skipped_overlong,
        vq_log,
    })
}

/// Seeded permutation split: the last `round(n · val_fraction)` shuffled
/// indices (capped so at least one stays) become the validation side.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = ((n as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let k = k.min(n.saturating_sub(1));
    let held = idx.split_off(n - k);
    (idx, held)
}

/// Tokenizes a stored dataset into per-task pools, encoding each referenced
/// frame once. Overlong records are skipped and counted.
pub fn tokenize_dataset(
    ds: &Dataset,
    bpe: &BpeVocab,
    vq: &VqModel<f32>,
    vocab: &UnifiedVocab,
    context: usize,
) -> Result<(ExamplePools, usize), HarnessError> {
    let all: Vec<usize> = (0..ds.records.len()).collect();
    tokenize_records(ds, &all, bpe, vq, vocab, context)
}

/// [`tokenize_dataset`] restricted to the records at `indices` (a split).
pub fn tokenize_records(
    ds: &Dataset,
    indices: &[usize],
    bpe: &BpeVocab,
    vq: &VqModel<f32>,
    vocab: &UnifiedVocab,
    context: usize,
) -> Result<(ExamplePools, usize), HarnessError> {
    let mut grids: std::collections::HashMap<usize, CodeGrid> = std::collections::HashMap::new();
    let mut grid_of = |frame: usize, vq: &VqModel<f32>| -> Result<CodeGrid, HarnessError> {
        if let Some(g) = grids.get(&frame) {
            return Ok(g.clone());
        }
        let g = vq_encode(vq, &ds.frames.frame(frame)?)?;
        grids.insert(frame, g.clone());
        Ok(g)
    };
    let mut pools = ExamplePools::default();
    let mut pb = PoolBuilder::new();
    for &i in indices {
        let r = ds.records.get(i).ok_or_else(|| {
            HarnessError::Config(format!("record index {i} out of range ({})", ds.records.len()))
        })?;
        match r.kind {
            TaskKind::Text => pb.push(&mut pools.text, build_text(&r.text, bpe, vocab, context))?,
            TaskKind::T2i => {
                let frame = r.frame.ok_or(DataError::BadRecord {
                    record: i,
                    kind: "t2i",
                    need: "frame",
                })?;
                let grid = grid_of(frame, vq)?;
                pb.push(&mut pools.t2i, build_t2i(&r.text, &grid, bpe, vocab, context))?;
            }
            TaskKind::I2t => {
                let frame = r.frame.ok_or(DataError::BadRecord {
                    record: i,
                    kind: "i2t",
                    need: "frame",
                })?;
                let grid = grid_of(frame, vq)?;
                pb.push(&mut pools.i2t, build_i2t(&grid, &r.text, bpe, vocab, context))?;
            }
        }
    }
    Ok((pools, pb.skipped_overlong))
}

/// Flattens pools into one fixed validation list (text, then t2i, then i2t).
pub fn flatten_pools(pools: ExamplePools) -> Vec<SequenceExample> {
    let mut out = pools.text;
    out.extend(pools.t2i);
    out.extend(pools.i2t);
    out
}

/// Reassembles (spec, render, caption) triples from a dataset's t2i records,
/// for generation-side evaluation against stored corpora.
pub fn dataset_scenes(ds: &Dataset) -> Result<Vec<SceneRecord>, HarnessError> {
    let all: Vec<usize> = (0..ds.records.len()).collect();
    dataset_scenes_for(ds, &all)
}

/// [`dataset_scenes`] restricted to the records at `indices` (a split).
pub fn dataset_scenes_for(ds: &Dataset, indices: &[usize]) -> Result<Vec<SceneRecord>, HarnessError> {
    let mut out = Vec::new();
    for &i in indices {
        let r = ds.records.get(i).ok_or_else(|| {
            HarnessError::Config(format!("record index {i} out of range ({})", ds.records.len()))
        })?;
        if r.kind != TaskKind::T2i {
            continue;
        }
        let spec = r
            .scene
            .clone()
            .ok_or(DataError::BadRecord { record: i, kind: "t2i", need: "scene" })?;
        let frame = r.frame.ok_or(DataError::BadRecord { record: i, kind: "t2i", need: "frame" })?;
        out.push(SceneRecord { spec, image: ds.frames.frame(frame)?, caption: r.text.clone() });
    }
    Ok(out)
}

/// Generation-side evaluation budget. Argmax decoding by default so that
/// scores are deterministic given the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalBudget {
    pub gen_prompts: usize,
    pub cap_images: usize,
    pub sample: SampleConfig,
}

impl Default for EvalBudget {
    fn default() -> Self {
        Self {
            gen_prompts: 200,
            cap_images: 200,
            sample: SampleConfig { temperature: 0.0, ..SampleConfig::default() },
        }
    }
}

/// Mean caption consistency of generated images plus their feature distance
/// to the held-out renders. `frechet` is `None` when either set is too small
/// for a stable covariance (needs more images than feature dimensions).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenEval {
    pub consistency: f64,
    pub frechet: Option<f64>,
    pub count: usize,
}

fn frechet_if_enough(generated: &[ImageU8], reference: &[ImageU8]) -> Result<Option<f64>, HarnessError> {
    if generated.len() > FEATURE_DIM && reference.len() > FEATURE_DIM {
        Ok(Some(frechet_feature_distance(generated, reference)?))
    } else {
        Ok(None)
    }
}

/// Generates one image per held-out caption and scores the batch.
pub fn generation_eval(
    model: &LmModel<f32>,
    vq: &VqModel<f32>,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    scenes: &[SceneRecord],
    budget: &EvalBudget,
) -> Result<GenEval, HarnessError> {
    let n = budget.gen_prompts.min(scenes.len());
    if n == 0 {
        return Err(HarnessError::Config("no held-out scenes to evaluate on".into()));
    }
    let g = vq.cfg.grid_dim();
    let mut generated = Vec::with_capacity(n);
    let mut total = 0.0;
    for rec in &scenes[..n] {
        let out = generate_image(model, vq, bpe, vocab, &rec.caption, g, g, budget.sample)?;
        let img = out.image.expect("image generation always decodes a grid");
        total += consistency_score(&rec.caption, &img)?.score;
        generated.push(img);
    }
    let reference: Vec<ImageU8> = scenes.iter().map(|r| r.image.clone()).collect();
    let frechet = frechet_if_enough(&generated, &reference)?;
    Ok(GenEval { consistency: total / n as f64, frechet, count: n })
}

/// Captions held-out renders and scores predicted facts against the true
/// scene; unparseable captions score zero.
pub fn caption_eval(
    model: &LmModel<f32>,
    vq: &VqModel<f32>,
    bpe: &BpeVocab,
    vocab: &UnifiedVocab,
    scenes: &[SceneRecord],
    budget: &EvalBudget,
) -> Result<f64, HarnessError> {
    let n = budget.cap_images.min(scenes.len());
    if n == 0 {
        return Err(HarnessError::Config("no held-out scenes to evaluate on".into()));
    }
    let mut total = 0.0;
    for rec in &scenes[..n] {
        let out = caption_image(model, vq, bpe, vocab, &rec.image, budget.sample)?;
        total += caption_fact_accuracy(&out.text.unwrap_or_default(), &rec.spec);
    }
    Ok(total / n as f64)
}

/// Floor for trained models: decode uniformly random code grids and score
/// them against the same held-out captions and reference renders.
pub fn random_code_baseline(
    vq: &VqModel<f32>,
    scenes: &[SceneRecord],
    n: usize,
    seed: u64,
) -> Result<GenEval, HarnessError> {
    if n == 0 || scenes.is_empty() {
        return Err(HarnessError::Config("need at least one random decode".into()));
    }
    let g = vq.cfg.grid_dim();
    let codes = vq.cfg.codes as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut decoded = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let ids: Vec<u32> = (0..g * g).map(|_| rng.random_range(0..codes)).collect();
        let img = vq_decode(vq, &CodeGrid::new(g, g, ids)?)?;
        total += consistency_score(&scenes[i % scenes.len()].caption, &img)?.score;
        decoded.push(img);
    }
    let reference: Vec<ImageU8> = scenes.iter().map(|r| r.image.clone()).collect();
    let frechet = frechet_if_enough(&decoded, &reference)?;
    Ok(GenEval { consistency: total / n as f64, frechet, count: n })
}

/// One sweep run's outcome. Metric fields are `None` when the run failed or
/// the metric is undefined for its regime (generation metrics need t2i
/// training; captioning metrics need i2t training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub size: String,
    pub param_count: usize,
    pub regime: Regime,
    pub failed: bool,
    pub error: Option<String>,
    pub val_loss_text: Option<f64>,
    pub val_loss_image: Option<f64>,
    pub token_accuracy_image: Option<f64>,
    pub consistency: Option<f64>,
    pub caption_accuracy: Option<f64>,
    pub frechet: Option<f64>,
    pub tokens_seen: u64,
    /// Analytic training compute: 6 · params · tokens_seen.
    pub flops_estimate: f64,
    pub val_split_hash: String,
    pub metrics_path: String,
    pub series_path: String,
    pub ckpt_path: Option<String>,
}

/// `sweep.csv` column order.
pub const SWEEP_COLUMNS: [&str; 17] = [
    "size",
    "param_count",
    "regime",
    "failed",
    "error",
    "val_loss_text",
    "val_loss_image",
    "token_accuracy_image",
    "consistency",
    "caption_accuracy",
    "frechet",
    "tokens_seen",
    "flops_estimate",
    "val_split_hash",
    "metrics_path",
    "series_path",
    "ckpt_path",
];

/// Shared settings for every run in a sweep. `seed` derives both the data
/// order (identical across runs) and per-size model init seeds.
pub struct RunSettings<'a> {
    pub tc: &'a TrainConfig,
    pub eval: &'a EvalBudget,
    pub seed: u64,
    pub out_dir: &'a Path,
    /// Keep each run's final model under its run directory.
    pub save_ckpt: bool,
}

#[derive(Debug, Default)]
struct RunOutcome {
    failed: bool,
    error: Option<String>,
    val_loss_text: Option<f64>,
    val_loss_image: Option<f64>,
    token_accuracy_image: Option<f64>,
    consistency: Option<f64>,
    caption_accuracy: Option<f64>,
    frechet: Option<f64>,
    tokens_seen: u64,
}

/// Trains a fresh model on `mix` and evaluates it. A run that aborts with a
/// non-finite loss or a clip violation is reported as failed, not an error.
fn train_and_eval(
    world: &ExperimentWorld,
    lm_cfg: &LmConfig,
    mix: MixSpec,
    init_seed: u64,
    do_gen: bool,
    do_cap: bool,
    tc: &TrainConfig,
    eval: &EvalBudget,
    metrics_path: &Path,
    ckpt_path: Option<&Path>,
) -> Result<RunOutcome, HarnessError> {
    let mut model = init_lm::<f32>(lm_cfg, init_seed)?;
    let mut opt = AdamW::new(&model.params, AdamWConfig::default());
    let stream = MixStream::new(&world.pools, mix)?;
    match fs::remove_file(metrics_path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let run = TrainRun {
        model: &mut model,
        opt: &mut opt,
        vocab: &world.vocab,
        stream: &stream,
        val: &world.val,
        cfg: tc.clone(),
        start_step: 0,
        stop_step: None,
        metrics_path: Some(metrics_path),
        ckpt_path,
    };
    let log = match train_lm(run) {
        Ok(l) => l,
        Err(e @ (TrainError::NonFiniteLoss { .. } | TrainError::ClipViolated { .. })) => {
            return Ok(RunOutcome { failed: true, error: Some(e.to_string()), ..RunOutcome::default() });
        }
        Err(e) => return Err(e.into()),
    };
    let fin = log
        .iter()
        .rev()
        .find(|p| p.val_loss_total.is_some())
        .ok_or_else(|| HarnessError::Config("training produced no validation point".into()))?
        .clone();
    let gen = if do_gen {
        Some(generation_eval(&model, &world.vq, &world.bpe, &world.vocab, &world.eval_scenes, eval)?)
    } else {
        None
    };
    let cap = if do_cap {
        Some(caption_eval(&model, &world.vq, &world.bpe, &world.vocab, &world.eval_scenes, eval)?)
    } else {
        None
    };
    Ok(RunOutcome {
        failed: false,
        error: None,
        val_loss_text: fin.val_loss_text,
        val_loss_image: fin.val_loss_image,
        token_accuracy_image: fin.token_accuracy_image,
        consistency: gen.map(|g| g.consistency),
        caption_accuracy: cap,
        frechet: gen.and_then(|g| g.frechet),
        tokens_seen: fin.tokens_seen,
    })
}

/// One directory per run: `{out}/{size}_{label}/` holding the metrics log,
/// the plot series, and optionally the final model.
fn run_paths(out_dir: &Path, size: &str, label: &str) -> (PathBuf, PathBuf, PathBuf) {
    let dir = out_dir.join(format!("{size}_{label}"));
    (dir.join("metrics.jsonl"), dir.join("series.csv"), dir.join("model.ckpt"))
}

/// Reads a metrics log written during training (one JSON object per line).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsPoint>, HarnessError> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes the plot-ready `(step, metric)` series for one run.
fn write_series(metrics: &[MetricsPoint], path: &Path) -> Result<(), HarnessError> {
    let opt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "train_loss",
        "val_loss_total",
        "val_loss_text",
        "val_loss_image",
        "token_accuracy_image",
        "tokens_seen",
    ])?;
    for p in metrics {
        w.write_record([
            p.step.to_string(),
            p.train_loss.to_string(),
            opt(p.val_loss_total),
            opt(p.val_loss_text),
            opt(p.val_loss_image),
            opt(p.token_accuracy_image),
            p.tokens_seen.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains and evaluates one (size, regime) cell. Training aborts are
/// captured in the record's `failed`/`error` fields.
pub fn run_one(
    world: &ExperimentWorld,
    size: &str,
    regime: Regime,
    s: &RunSettings,
) -> Result<SweepRecord, HarnessError> {
    let lm_cfg = LmConfig::by_name(size, world.vocab.total())?;
    let size_idx = LADDER.iter().position(|&n| n == size).unwrap_or(LADDER.len()) as u64;
    let init_seed = mix_seed(s.seed, 10 + size_idx);
    let data_seed = mix_seed(s.seed, 1);
    let (rt, r2, ri) = regime.ratios();
    let mix = MixSpec::new(rt, r2, ri, data_seed)?;
    let (metrics_path, series_path, ckpt_path) = run_paths(s.out_dir, size, regime.as_str());
    fs::create_dir_all(metrics_path.parent().expect("run file base has a parent"))?;
    let out = train_and_eval(
        world,
        &lm_cfg,
        mix,
        init_seed,
        regime.trains_t2i(),
        regime.trains_i2t(),
        s.tc,
        s.eval,
        &metrics_path,
        s.save_ckpt.then_some(ckpt_path.as_path()),
    )?;
    if metrics_path.exists() {
        write_series(&read_metrics(&metrics_path)?, &series_path)?;
    }
    Ok(SweepRecord {
        size: size.to_string(),
        param_count: lm_cfg.param_count(),
        regime,
        failed: out.failed,
        error: out.error,
        val_loss_text: out.val_loss_text,
        val_loss_image: out.val_loss_image,
        token_accuracy_image: out.token_accuracy_image,
        consistency: out.consistency,
        caption_accuracy: out.caption_accuracy,
        frechet: out.frechet,
        tokens_seen: out.tokens_seen,
        flops_estimate: 6.0 * lm_cfg.param_count() as f64 * out.tokens_seen as f64,
        val_split_hash: world.val_hash.clone(),
        metrics_path: metrics_path.display().to_string(),
        series_path: series_path.display().to_string(),
        ckpt_path: (s.save_ckpt && !out.failed).then(|| ckpt_path.display().to_string()),
    })
}

fn write_sweep_outputs(records: &[SweepRecord], out_dir: &Path) -> Result<(), HarnessError> {
    let opt = |o: Option<f64>| o.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in records {
        w.write_record([
            r.size.clone(),
            r.param_count.to_string(),
            r.regime.as_str().to_string(),
            r.failed.to_string(),
            r.error.clone().unwrap_or_default(),
            opt(r.val_loss_text),
            opt(r.val_loss_image),
            opt(r.token_accuracy_image),
            opt(r.consistency),
            opt(r.caption_accuracy),
            opt(r.frechet),
            r.tokens_seen.to_string(),
            r.flops_estimate.to_string(),
            r.val_split_hash.clone(),
            r.metrics_path.clone(),
            r.series_path.clone(),
            r.ckpt_path.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let f = fs::File::create(out_dir.join("sweep.json"))?;
    serde_json::to_writer_pretty(f, records)?;
    Ok(())
}

/// Runs every (size, regime) cell, persisting `sweep.csv` (columns per
/// [`SWEEP_COLUMNS`]), a `sweep.json` mirror, and per-run metrics/series
/// files. A run that aborts is flagged failed and the sweep continues.
pub fn run_sweep(
    world: &ExperimentWorld,
    sizes: &[&str],
    regimes: &[Regime],
    s: &RunSettings,
) -> Result<Vec<SweepRecord>, HarnessError> {
    fs::create_dir_all(s.out_dir)?;
    let mut records = Vec::with_capacity(sizes.len() * regimes.len());
    for &size in sizes {
        for &regime in regimes {
            records.push(run_one(world, size, regime, s)?);
        }
    }
    write_sweep_outputs(&records, s.out_dir)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TradeoffVerdict {
    /// The language cost of mixing strictly shrinks from the smallest to
    /// the largest size.
    Shrinking,
    NotShrinking,
}

/// Per-size cost of mixing: losses of the mixed model minus the matching
/// single-task specialist, at equal budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub size: String,
    pub param_count: usize,
    /// val_loss_text(mixed) − val_loss_text(text-only).
    pub delta_lang: f64,
    /// val_loss_image(mixed) − val_loss_image(t2i-only).
    pub delta_gen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    /// Rows ascending by parameter count.
    pub rows: Vec<TradeoffRow>,
    pub verdict: TradeoffVerdict,
}

fn require_metric(
    r: &SweepRecord,
    metric: &'static str,
    v: Option<f64>,
) -> Result<f64, HarnessError> {
    v.ok_or_else(|| HarnessError::MissingMetric {
        run: format!("{}/{}", r.size, r.regime.as_str()),
        metric,
    })
}

/// Derives the mixing trade-off from a completed sweep. Every size needs a
/// non-failed run in all three regimes; the error lists any absent ones.
pub fn tradeoff_report(records: &[SweepRecord]) -> Result<TradeoffReport, HarnessError> {
    let mut sizes: Vec<(String, usize)> = Vec::new();
    for r in records {
        if !sizes.iter().any(|(s, _)| *s == r.size) {
            sizes.push((r.size.clone(), r.param_count));
        }
    }
    sizes.sort_by_key(|&(_, p)| p);

    let find = |size: &str, regime: Regime| {
        records.iter().find(|r| r.size == size && r.regime == regime && !r.failed)
    };
    let mut missing = Vec::new();
    for (size, _) in &sizes {
        for regime in REGIMES {
            if find(size, regime).is_none() {
                missing.push(format!("{size}/{}", regime.as_str()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingRuns(missing.join(", ")));
    }

    let mut rows = Vec::with_capacity(sizes.len());
    for (size, param_count) in &sizes {
        let text = find(size, Regime::TextOnly).expect("checked above");
        let t2i = find(size, Regime::T2iOnly).expect("checked above");
        let mixed = find(size, Regime::Mixed).expect("checked above");
        let delta_lang = require_metric(mixed, "val_loss_text", mixed.val_loss_text)?
            - require_metric(text, "val_loss_text", text.val_loss_text)?;
        let delta_gen = require_metric(mixed, "val_loss_image", mixed.val_loss_image)?
            - require_metric(t2i, "val_loss_image", t2i.val_loss_image)?;
        rows.push(TradeoffRow { size: size.clone(), param_count: *param_count, delta_lang, delta_gen });
    }
    let verdict = match (rows.first(), rows.last()) {
        (Some(first), Some(last)) if rows.len() > 1 && last.delta_lang < first.delta_lang => {
            TradeoffVerdict::Shrinking
        }
        _ => TradeoffVerdict::NotShrinking,
    };
    Ok(TradeoffReport { rows, verdict })
}

/// Step budgets for the three mutual-boost runs; the comparison is only
/// meaningful at equal budgets, so unequal ones are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoostBudgets {
    pub baseline: u64,
    pub add_t2i: u64,
    pub add_i2t: u64,
}

impl BoostBudgets {
    pub fn equal(steps: u64) -> Self {
        Self { baseline: steps, add_t2i: steps, add_i2t: steps }
    }
}

/// (label, (text, t2i, i2t) ratios) for the three mutual-boost mixes.
pub const BOOST_MIXES: [(&str, (u32, u32, u32)); 3] =
    [("baseline", (1, 1, 1)), ("add-t2i", (1, 2, 1)), ("add-i2t", (1, 1, 2))];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRow {
    pub mix: String,
    pub ratios: (u32, u32, u32),
    pub steps: u64,
    pub val_loss_text: Option<f64>,
    pub val_loss_image: Option<f64>,
    pub consistency: f64,
    pub caption_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostTable {
    pub size: String,
    pub rows: Vec<BoostRow>,
}

impl BoostTable {
    pub fn row(&self, mix: &str) -> Option<&BoostRow> {
        self.rows.iter().find(|r| r.mix == mix)
    }
}

/// Trains three models of one size on the baseline 1:1:1 mix and on the
/// same mix with doubled t2i or i2t share, from identical pools, seeds, and
/// budgets, then scores generation consistency and caption-fact accuracy.
/// Writes `boost.json` plus per-run metrics logs under `out_dir`.
pub fn mutual_boost_experiment(
    world: &ExperimentWorld,
    size: &str,
    budgets: BoostBudgets,
    tc: &TrainConfig,
    eval: &EvalBudget,
    seed: u64,
    out_dir: &Path,
) -> Result<BoostTable, HarnessError> {
    if budgets.baseline != budgets.add_t2i || budgets.baseline != budgets.add_i2t {
        return Err(HarnessError::UnequalBudgets {
            baseline: budgets.baseline,
            add_t2i: budgets.add_t2i,
            add_i2t: budgets.add_i2t,
        });
    }
    let lm_cfg = LmConfig::by_name(size, world.vocab.total())?;
    let size_idx = LADDER.iter().position(|&n| n == size).unwrap_or(LADDER.len()) as u64;
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(BOOST_MIXES.len());
    for (label, (rt, r2, ri)) in BOOST_MIXES {
        let tc_run = TrainConfig { steps: budgets.baseline, ..tc.clone() };
        let mix = MixSpec::new(rt, r2, ri, mix_seed(seed, 1))?;
        let run_dir = out_dir.join(label);
        fs::create_dir_all(&run_dir)?;
        let metrics_path = run_dir.join("metrics.jsonl");
        let out = train_and_eval(
            world,
            &lm_cfg,
            mix,
            mix_seed(seed, 10 + size_idx),
            true,
            true,
            &tc_run,
            eval,
            &metrics_path,
            None,
        )?;
        if out.failed {
            return Err(HarnessError::RunFailed {
                run: format!("{size}/{label}"),
                reason: out.error.unwrap_or_else(|| "training aborted".into()),
            });
        }
        rows.push(BoostRow {
            mix: label.to_string(),
            ratios: (rt, r2, ri),
            steps: budgets.baseline,
            val_loss_text: out.val_loss_text,
            val_loss_image: out.val_loss_image,
            consistency: out.consistency.expect("generation eval ran"),
            caption_accuracy: out.caption_accuracy.expect("caption eval ran"),
        });
    }
    let table = BoostTable { size: size.to_string(), rows };
    let f = fs::File::create(out_dir.join("boost.json"))?;
    serde_json::to_writer_pretty(f, &table)?;
    Ok(table)
}
