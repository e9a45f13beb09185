//! Corpus synthesis and text-tokenizer training.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use unimix_core::data::synth_dataset;
use unimix_core::sequence::TaskKind;
use unimix_core::BpeVocab;

use crate::config::Config;
use crate::manifest::Manifest;
use crate::commands::{load_dataset, DATA_FRAMES, DATA_RECORDS};

/// Synthesizes `n` scenes plus `n` standalone text lines and saves the
/// container. Prints the content hash so reruns can be compared directly.
pub fn corpus_gen_cmd(
    cfg: &Config,
    argv: &[String],
    n: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let (n_scenes, n_text) = match n {
        Some(n) => (n, n),
        None => (cfg.corpus.n_scenes, cfg.corpus.n_text),
    };
    let seed = seed.unwrap_or(cfg.corpus.seed);
    if n_scenes == 0 && n_text == 0 {
        bail!("corpus.n_scenes and corpus.n_text are both zero; nothing to generate");
    }
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("corpus-gen", argv);
    m.seed("corpus", seed);

    let ds = synth_dataset(n_scenes, n_text, seed);
    let records = out_dir.join(DATA_RECORDS);
    let frames = out_dir.join(DATA_FRAMES);
    ds.save(&records, &frames)?;
    m.output(&records);
    m.output(&frames);
    m.write(cfg, out_dir)?;
    println!(
        "wrote {} records / {} frames to {}",
        ds.records.len(),
        ds.frames.len(),
        out_dir.display()
    );
    println!("content_hash {}", ds.content_hash());
    Ok(())
}

/// Trains the byte-pair vocabulary on the corpus text: standalone lines plus
/// one copy of each caption (t2i records; i2t rows repeat the same caption).
pub fn bpe_train_cmd(
    cfg: &Config,
    argv: &[String],
    data_dir: &Path,
    target: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let target = target.unwrap_or(cfg.bpe.target);
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("bpe-train", argv);
    m.input(&data_dir.join(DATA_RECORDS))?;
    m.input(&data_dir.join(DATA_FRAMES))?;

    let ds = load_dataset(data_dir)?;
    let corpus: Vec<&str> = ds
        .records
        .iter()
        .filter(|r| matches!(r.kind, TaskKind::Text | TaskKind::T2i))
        .map(|r| r.text.as_str())
        .collect();
    if corpus.is_empty() {
        bail!("dataset {} holds no text to train on", data_dir.display());
    }
    let bpe = BpeVocab::train(corpus, target).context("bpe.target")?;
    let out = out_dir.join("bpe.json");
    bpe.save(&out)?;
    m.output(&out);
    m.write(cfg, out_dir)?;
    println!("trained {} tokens -> {}", bpe.size(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv() -> Vec<String> {
        vec!["unimix".into(), "test".into()]
    }

    #[test]
    fn corpus_gen_is_deterministic_and_manifested() {
        let cfg = Config::default();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        corpus_gen_cmd(&cfg, &argv(), Some(4), Some(7), &a).unwrap();
        corpus_gen_cmd(&cfg, &argv(), Some(4), Some(7), &b).unwrap();
        let ds_a = load_dataset(&a).unwrap();
        let ds_b = load_dataset(&b).unwrap();
        assert_eq!(ds_a.content_hash(), ds_b.content_hash());
        assert!(a.join("manifest.json").is_file());
        assert_eq!(ds_a.records.len(), 4 * 2 + 4);
    }

    #[test]
    fn bpe_train_reads_each_caption_once() {
        let cfg = Config::default();
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        corpus_gen_cmd(&cfg, &argv(), Some(6), Some(3), &data).unwrap();
        let out = tmp.path().join("bpe");
        bpe_train_cmd(&cfg, &argv(), &data, Some(280), &out).unwrap();
        let bpe = BpeVocab::load(&out.join("bpe.json")).unwrap();
        assert_eq!(bpe.size(), 280);
        assert!(out.join("manifest.json").is_file());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let cfg = Config::default();
        let tmp = tempfile::tempdir().unwrap();
        let err =
            corpus_gen_cmd(&cfg, &argv(), Some(0), None, tmp.path()).unwrap_err().to_string();
        assert!(err.contains("n_scenes"), "{err}");
    }
}
