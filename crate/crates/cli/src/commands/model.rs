//! Model-stage commands: pretraining on a stored corpus, prompted image
//! generation, image captioning, and held-out evaluation.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use unimix_core::checkpoint::LoadedLm;
use unimix_core::data::Dataset;
use unimix_core::harness::{
    caption_eval, dataset_scenes_for, flatten_pools, generation_eval, random_code_baseline,
    split_indices, tokenize_records, GenEval,
};
use unimix_core::image::{from_ppm, to_ppm};
use unimix_core::generate::{caption_image, generate_image};
use unimix_core::lm::init_lm;
use unimix_core::optim::{AdamW, AdamWConfig};
use unimix_core::scene::SceneRecord;
use unimix_core::seeding::mix_seed;
use unimix_core::sequence::{MixSpec, MixStream, TaskKind};
use unimix_core::trainer::{train_lm, validate_lm, TrainRun};
use unimix_core::vocab::UnifiedVocab;
use unimix_core::{BpeVocab, LmConfig, VqModel};

use crate::config::Config;
use crate::manifest::Manifest;
use crate::commands::{
    load_bpe, load_dataset, load_lm, load_vq, parse_regime, parse_size, DATA_FRAMES, DATA_RECORDS,
};

/// Splits records into (train, val) without leakage: the t2i/i2t pair that
/// shares a frame moves as one unit, standalone text lines move alone.
pub fn record_split(ds: &Dataset, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut unit_of_frame: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        match (r.kind, r.frame) {
            (TaskKind::Text, _) | (_, None) => units.push(vec![i]),
            (_, Some(f)) => match unit_of_frame.get(&f) {
                Some(&u) => units[u].push(i),
                None => {
                    unit_of_frame.insert(f, units.len());
                    units.push(vec![i]);
                }
            },
        }
    }
    let (tr, va) = split_indices(units.len(), val_fraction, seed);
    let expand = |ids: Vec<usize>| {
        let mut out: Vec<usize> = ids.into_iter().flat_map(|u| units[u].clone()).collect();
        out.sort_unstable();
        out
    };
    (expand(tr), expand(va))
}

/// Checks that the tokenizer pair a command was given reproduces the
/// vocabulary a checkpoint was trained with.
fn check_vocab(vocab: &UnifiedVocab, bpe: &BpeVocab, vq: &VqModel<f32>) -> Result<()> {
    if vocab.text_size() != bpe.size() as u32 {
        bail!(
            "checkpoint expects {} text tokens but bpe.json holds {}",
            vocab.text_size(),
            bpe.size()
        );
    }
    if vocab.image_codes() != vq.cfg.codes as u32 {
        bail!(
            "checkpoint expects {} image codes but vq.ckpt holds {}",
            vocab.image_codes(),
            vq.cfg.codes
        );
    }
    Ok(())
}

/// Trains (or resumes) one model on a stored corpus under a named regime.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_cmd(
    cfg: &Config,
    argv: &[String],
    data_dir: &Path,
    bpe_path: &Path,
    vq_path: &Path,
    size: Option<&str>,
    regime: Option<&str>,
    steps: Option<u64>,
    resume: bool,
    out_dir: &Path,
) -> Result<()> {
    let size = parse_size(size.unwrap_or(&cfg.train.size))?;
    let regime = parse_regime(regime.unwrap_or(&cfg.train.regime))?;
    let mut tc = cfg.train.to_train_config();
    if let Some(s) = steps {
        tc.steps = s;
    }
    if tc.steps == 0 {
        bail!("train.steps must be positive");
    }
    fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let metrics_path = out_dir.join("metrics.jsonl");

    let mut m = Manifest::new("pretrain", argv);
    m.input(&data_dir.join(DATA_RECORDS))?;
    m.input(&data_dir.join(DATA_FRAMES))?;
    m.input(bpe_path)?;
    m.input(vq_path)?;
    if resume {
        m.input(&ckpt_path)?;
    }
    let data_seed = mix_seed(cfg.train.seed, 1);
    m.seed("train", cfg.train.seed);
    m.seed("data", data_seed);
    m.seed("split", cfg.train.split_seed);

    let ds = load_dataset(data_dir)?;
    let bpe = load_bpe(bpe_path)?;
    let vq = load_vq(vq_path)?;
    let vocab = UnifiedVocab::new(bpe.size() as u32, vq.cfg.codes as u32)?;
    let mut lm_cfg = LmConfig::by_name(size, vocab.total())?;
    lm_cfg.context = cfg.train.context;

    let (train_idx, val_idx) = record_split(&ds, cfg.train.val_fraction, cfg.train.split_seed);
    let (pools, skipped) =
        tokenize_records(&ds, &train_idx, &bpe, &vq, &vocab, lm_cfg.context)?;
    let (val_pools, val_skipped) =
        tokenize_records(&ds, &val_idx, &bpe, &vq, &vocab, lm_cfg.context)?;
    let val = flatten_pools(val_pools);
    if skipped + val_skipped > 0 {
        eprintln!("warning: skipped {} overlong records", skipped + val_skipped);
    }

    let (rt, r2, ri) = regime.ratios();
    let mix = MixSpec::new(rt, r2, ri, data_seed)?;
    let stream = MixStream::new(&pools, mix)?;

    let init_seed;
    let (mut model, mut opt, start_step) = if resume {
        let loaded: LoadedLm<f32> = load_lm(&ckpt_path)?;
        if loaded.vocab != vocab {
            bail!(
                "resume checkpoint was trained with a different vocabulary ({} total vs {})",
                loaded.vocab.total(),
                vocab.total()
            );
        }
        if loaded.model.cfg != lm_cfg {
            bail!("resume checkpoint is a different architecture than train.size={size}");
        }
        init_seed = None;
        let opt = match loaded.opt {
            Some(o) => o,
            None => AdamW::new(&loaded.model.params, AdamWConfig::default()),
        };
        (loaded.model, opt, loaded.step)
    } else {
        let seed = mix_seed(cfg.train.seed, 10);
        init_seed = Some(seed);
        match fs::remove_file(&metrics_path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }
        let model = init_lm::<f32>(&lm_cfg, seed)?;
        let opt = AdamW::new(&model.params, AdamWConfig::default());
        (model, opt, 0)
    };
    if let Some(s) = init_seed {
        m.seed("init", s);
    }
    if start_step >= tc.steps {
        bail!("checkpoint is already at step {start_step}; raise train.steps past it");
    }

    let log = train_lm(TrainRun {
        model: &mut model,
        opt: &mut opt,
        vocab: &vocab,
        stream: &stream,
        val: &val,
        cfg: tc,
        start_step,
        stop_step: None,
        metrics_path: Some(&metrics_path),
        ckpt_path: Some(&ckpt_path),
    })?;

    m.output(&metrics_path);
    m.output(&ckpt_path);
    m.write(cfg, out_dir)?;
    let last = log.last().context("training produced no metrics")?;
    println!(
        "{size}/{} trained steps {start_step}..{}: train_loss {:.4} val_loss {}",
        regime.as_str(),
        tc.steps,
        last.train_loss,
        last.val_loss_total.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
    );
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

/// Renders a caption to an image with the full trained stack.
#[allow(clippy::too_many_arguments)]
pub fn generate_cmd(
    cfg: &Config,
    argv: &[String],
    model_path: &Path,
    vq_path: &Path,
    bpe_path: &Path,
    prompt: &str,
    rows: Option<usize>,
    cols: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("generate", argv);
    m.input(model_path)?;
    m.input(vq_path)?;
    m.input(bpe_path)?;
    let sample = cfg.sample.to_sample_config();
    m.seed("sample", sample.seed);

    let loaded = load_lm(model_path)?;
    let vq = load_vq(vq_path)?;
    let bpe = load_bpe(bpe_path)?;
    check_vocab(&loaded.vocab, &bpe, &vq)?;
    let g = vq.cfg.grid_dim();
    let (rows, cols) = (rows.unwrap_or(g), cols.unwrap_or(g));

    let out = generate_image(&loaded.model, &vq, &bpe, &loaded.vocab, prompt, rows, cols, sample)?;
    let image = out.image.as_ref().expect("image generation decodes a grid");
    let grid = out.grid.as_ref().expect("image generation keeps its grid");
    let img_path = out_dir.join("image.ppm");
    let grid_path = out_dir.join("grid.json");
    fs::write(&img_path, to_ppm(image))?;
    fs::write(&grid_path, serde_json::to_vec_pretty(grid)?)?;
    m.output(&img_path);
    m.output(&grid_path);
    m.write(cfg, out_dir)?;
    println!(
        "generated {}x{} codes -> {}x{} pixels at {}",
        rows,
        cols,
        image.height(),
        image.width(),
        img_path.display()
    );
    Ok(())
}

/// Captions a PPM image; the caption goes to stdout and `caption.txt`.
pub fn caption_cmd(
    cfg: &Config,
    argv: &[String],
    model_path: &Path,
    vq_path: &Path,
    bpe_path: &Path,
    image_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("caption", argv);
    m.input(model_path)?;
    m.input(vq_path)?;
    m.input(bpe_path)?;
    m.input(image_path)?;
    let sample = cfg.sample.to_sample_config();
    m.seed("sample", sample.seed);

    let loaded = load_lm(model_path)?;
    let vq = load_vq(vq_path)?;
    let bpe = load_bpe(bpe_path)?;
    check_vocab(&loaded.vocab, &bpe, &vq)?;
    let img = from_ppm(&fs::read(image_path)?)?;
    let out = caption_image(&loaded.model, &vq, &bpe, &loaded.vocab, &img, sample)?;
    let caption = out.text.unwrap_or_default();
    let path = out_dir.join("caption.txt");
    fs::write(&path, &caption)?;
    m.output(&path);
    m.write(cfg, out_dir)?;
    println!("{caption}");
    Ok(())
}

/// Everything `eval` reports on a stored corpus's validation split.
#[derive(Debug, Serialize)]
struct EvalDoc {
    val_records: usize,
    val_examples: usize,
    val_scenes: usize,
    loss_total: f64,
    loss_text: f64,
    loss_image: f64,
    token_accuracy_image: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    generation: Option<GenEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    random_baseline: Option<GenEval>,
}

/// Scores a checkpoint on the corpus's validation split: token-level losses
/// always; generation/captioning quality when the split has scenes.
#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    cfg: &Config,
    argv: &[String],
    data_dir: &Path,
    bpe_path: &Path,
    vq_path: &Path,
    model_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("eval", argv);
    m.input(&data_dir.join(DATA_RECORDS))?;
    m.input(&data_dir.join(DATA_FRAMES))?;
    m.input(bpe_path)?;
    m.input(vq_path)?;
    m.input(model_path)?;
    m.seed("split", cfg.train.split_seed);

    let ds = load_dataset(data_dir)?;
    let bpe = load_bpe(bpe_path)?;
    let vq = load_vq(vq_path)?;
    let loaded = load_lm(model_path)?;
    check_vocab(&loaded.vocab, &bpe, &vq)?;

    let (_, val_idx) = record_split(&ds, cfg.train.val_fraction, cfg.train.split_seed);
    let (val_pools, _) =
        tokenize_records(&ds, &val_idx, &bpe, &vq, &loaded.vocab, loaded.model.cfg.context)?;
    let val = flatten_pools(val_pools);
    if val.is_empty() {
        bail!("train.val_fraction leaves no validation records");
    }
    let report = validate_lm(&loaded.model, &loaded.vocab, &val, cfg.train.batch_size)?;

    let scenes: Vec<SceneRecord> = dataset_scenes_for(&ds, &val_idx)?;
    let budget = cfg.to_eval_budget();
    let (generation, caption_accuracy, random_baseline) = if scenes.is_empty() {
        (None, None, None)
    } else {
        (
            Some(generation_eval(&loaded.model, &vq, &bpe, &loaded.vocab, &scenes, &budget)?),
            Some(caption_eval(&loaded.model, &vq, &bpe, &loaded.vocab, &scenes, &budget)?),
            Some(random_code_baseline(&vq, &scenes, budget.gen_prompts.min(scenes.len()), 11)?),
        )
    };

    let doc = EvalDoc {
        val_records: val_idx.len(),
        val_examples: val.len(),
        val_scenes: scenes.len(),
        loss_total: report.loss_total,
        loss_text: report.loss_text,
        loss_image: report.loss_image,
        token_accuracy_image: report.token_accuracy_image,
        generation,
        caption_accuracy,
        random_baseline,
    };
    let path = out_dir.join("eval.json");
    fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
    m.output(&path);
    m.write(cfg, out_dir)?;
    println!(
        "val_loss {:.4} (text {:.4}, image {:.4}) token_accuracy_image {:.3}",
        doc.loss_total, doc.loss_text, doc.loss_image, doc.token_accuracy_image
    );
    if let Some(g) = &doc.generation {
        println!(
            "generation consistency {:.3} over {} prompts (random floor {:.3})",
            g.consistency,
            g.count,
            doc.random_baseline.map(|r| r.consistency).unwrap_or(f64::NAN)
        );
    }
    if let Some(c) = doc.caption_accuracy {
        println!("caption fact accuracy {c:.3}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::codec::vq_train_cmd;
    use crate::commands::data::{bpe_train_cmd, corpus_gen_cmd};
    use std::path::PathBuf;

    fn argv() -> Vec<String> {
        vec!["unimix".into(), "test".into()]
    }

    /// One micro pipeline shared by the tests: corpus, tokenizers, codec.
    struct Stack {
        cfg: Config,
        _tmp: tempfile::TempDir,
        data: PathBuf,
        bpe: PathBuf,
        vq: PathBuf,
        out: PathBuf,
    }

    fn stack() -> Stack {
        let mut cfg = Config::default();
        cfg.bpe.target = 280;
        cfg.vq.hidden = 8;
        cfg.vq.code_dim = 8;
        cfg.vq.codes = 32;
        cfg.vq_train.steps = 4;
        cfg.vq_train.batch_size = 4;
        cfg.train.size = "tiny".into();
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        cfg.train.eval_every = 0;
        cfg.train.context = 192;
        cfg.train.val_fraction = 0.3;
        cfg.eval.gen_prompts = 2;
        cfg.eval.cap_images = 2;
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        corpus_gen_cmd(&cfg, &argv(), Some(10), Some(5), &data).unwrap();
        let bpe_dir = tmp.path().join("bpe");
        bpe_train_cmd(&cfg, &argv(), &data, None, &bpe_dir).unwrap();
        let codec = tmp.path().join("codec");
        vq_train_cmd(&cfg, &argv(), &data, None, &codec).unwrap();
        let out = tmp.path().join("run");
        Stack {
            cfg,
            data,
            bpe: bpe_dir.join("bpe.json"),
            vq: codec.join("vq.ckpt"),
            out,
            _tmp: tmp,
        }
    }

    #[test]
    fn record_split_keeps_frame_pairs_together() {
        let ds = unimix_core::data::synth_dataset(10, 10, 0);
        let (tr, va) = record_split(&ds, 0.3, 7);
        assert_eq!(tr.len() + va.len(), ds.records.len());
        for side in [&tr, &va] {
            for &i in side.iter() {
                if let Some(f) = ds.records[i].frame {
                    // Every record sharing this frame sits on the same side.
                    for (j, r) in ds.records.iter().enumerate() {
                        if r.frame == Some(f) {
                            assert!(side.contains(&j), "frame {f} split across sides");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pretrain_then_eval_and_roundtrip_commands() {
        let s = stack();
        pretrain_cmd(
            &s.cfg,
            &argv(),
            &s.data,
            &s.bpe,
            &s.vq,
            None,
            Some("mixed"),
            None,
            false,
            &s.out,
        )
        .unwrap();
        assert!(s.out.join("model.ckpt").is_file());
        assert!(s.out.join("metrics.jsonl").is_file());
        assert!(s.out.join("manifest.json").is_file());

        // Resuming past the end is a validation error, not a silent no-op.
        let err = pretrain_cmd(
            &s.cfg,
            &argv(),
            &s.data,
            &s.bpe,
            &s.vq,
            None,
            Some("mixed"),
            None,
            true,
            &s.out,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("train.steps"), "{err}");

        // Resume with a longer horizon continues from the checkpoint.
        pretrain_cmd(
            &s.cfg,
            &argv(),
            &s.data,
            &s.bpe,
            &s.vq,
            None,
            Some("mixed"),
            Some(5),
            true,
            &s.out,
        )
        .unwrap();

        let model = s.out.join("model.ckpt");
        let gen_dir = s.out.join("gen");
        generate_cmd(
            &s.cfg,
            &argv(),
            &model,
            &s.vq,
            &s.bpe,
            "one red circle on white",
            None,
            None,
            &gen_dir,
        )
        .unwrap();
        let ppm = std::fs::read(gen_dir.join("image.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n32 32\n255\n"));

        let cap_dir = s.out.join("cap");
        caption_cmd(&s.cfg, &argv(), &model, &s.vq, &s.bpe, &gen_dir.join("image.ppm"), &cap_dir)
            .unwrap();
        assert!(cap_dir.join("caption.txt").is_file());

        let eval_dir = s.out.join("eval");
        eval_cmd(&s.cfg, &argv(), &s.data, &s.bpe, &s.vq, &model, &eval_dir).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap())
                .unwrap();
        assert!(doc["loss_total"].as_f64().unwrap() > 0.0);
        assert!(doc["generation"]["consistency"].as_f64().is_some());
    }

    #[test]
    fn mismatched_tokenizers_are_rejected() {
        let s = stack();
        pretrain_cmd(
            &s.cfg,
            &argv(),
            &s.data,
            &s.bpe,
            &s.vq,
            Some("tiny"),
            Some("text"),
            Some(1),
            false,
            &s.out,
        )
        .unwrap();
        // A codec with a different codebook size cannot serve this model.
        let mut cfg2 = s.cfg.clone();
        cfg2.vq.codes = 16;
        let codec2 = s.out.join("codec2");
        vq_train_cmd(&cfg2, &argv(), &s.data, Some(2), &codec2).unwrap();
        let err = generate_cmd(
            &s.cfg,
            &argv(),
            &s.out.join("model.ckpt"),
            &codec2.join("vq.ckpt"),
            &s.bpe,
            "x",
            None,
            None,
            &s.out.join("g2"),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("image codes"), "{err}");
    }
}
