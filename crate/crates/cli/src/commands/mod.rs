//! Subcommand implementations. Each command resolves its parameters from
//! the layered config plus explicit flags, runs one pipeline stage, and
//! writes a manifest into its output directory.

mod codec;
mod data;
mod experiments;
mod model;

pub use codec::{vq_decode_cmd, vq_encode_cmd, vq_train_cmd};
pub use data::{bpe_train_cmd, corpus_gen_cmd};
pub use experiments::{boost_experiment_cmd, sweep_cmd, tradeoff_report_cmd};
pub use model::{caption_cmd, eval_cmd, generate_cmd, pretrain_cmd};

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use unimix_core::checkpoint::{load_lm_checkpoint, load_vq_checkpoint, LoadedLm};
use unimix_core::data::Dataset;
use unimix_core::harness::Regime;
use unimix_core::lm::LADDER;
use unimix_core::{BpeVocab, VqModel};

/// Dataset container layout under a corpus directory.
pub const DATA_RECORDS: &str = "data.jsonl";
pub const DATA_FRAMES: &str = "frames.bin";

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(&dir.join(DATA_RECORDS), &dir.join(DATA_FRAMES))
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_bpe(path: &Path) -> Result<BpeVocab> {
    BpeVocab::load(path).with_context(|| format!("loading text tokenizer {}", path.display()))
}

fn load_vq(path: &Path) -> Result<VqModel<f32>> {
    Ok(load_vq_checkpoint::<f32>(path)
        .with_context(|| format!("loading image codec {}", path.display()))?
        .model)
}

fn load_lm(path: &Path) -> Result<LoadedLm<f32>> {
    load_lm_checkpoint::<f32>(path)
        .with_context(|| format!("loading model checkpoint {}", path.display()))
}

fn parse_size(name: &str) -> Result<&str> {
    LADDER
        .iter()
        .find(|&&s| s == name)
        .copied()
        .ok_or_else(|| anyhow!("train.size `{name}` is not one of {LADDER:?}"))
}

/// Accepts both the short regime names (`text`, `t2i`) and the full ones.
fn parse_regime(name: &str) -> Result<Regime> {
    match name {
        "text" | "text-only" => Ok(Regime::TextOnly),
        "t2i" | "t2i-only" => Ok(Regime::T2iOnly),
        "mixed" => Ok(Regime::Mixed),
        other => bail!("regime `{other}` is not one of text, t2i, mixed"),
    }
}

fn parse_list<'a, T>(raw: &'a str, what: &str, parse: impl Fn(&'a str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        bail!("{what} list is empty");
    }
    items.into_iter().map(parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_accept_both_forms() {
        assert_eq!(parse_regime("text").unwrap(), Regime::TextOnly);
        assert_eq!(parse_regime("text-only").unwrap(), Regime::TextOnly);
        assert_eq!(parse_regime("t2i").unwrap(), Regime::T2iOnly);
        assert_eq!(parse_regime("mixed").unwrap(), Regime::Mixed);
        assert!(parse_regime("i2t").is_err());
    }

    #[test]
    fn size_and_list_parsing() {
        assert_eq!(parse_size("base").unwrap(), "base");
        assert!(parse_size("huge").is_err());
        let sizes = parse_list("tiny, small", "sizes", parse_size).unwrap();
        assert_eq!(sizes, vec!["tiny", "small"]);
        assert!(parse_list("", "sizes", parse_size).is_err());
    }
}
