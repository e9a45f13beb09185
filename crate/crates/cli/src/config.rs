//! Layered run configuration: built-in defaults, then an optional TOML file
//! (`--config` or `$UNIMIX_CONFIG`), then repeatable `--set key=value`
//! overrides, then explicit command-line flags. The fully resolved snapshot
//! is echoed into every run manifest.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use unimix_core::harness::{EvalBudget, WorldConfig};
use unimix_core::{SampleConfig, TrainConfig, VqConfig, VqTrainConfig};

pub const CONFIG_ENV: &str = "UNIMIX_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub bpe: BpeSection,
    pub vq: VqSection,
    pub vq_train: VqTrainSection,
    pub world: WorldSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub boost: BoostSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_scenes: usize,
    pub n_text: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { n_scenes: 2048, n_text: 2048, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSection {
    /// Total text vocabulary size including the 256 byte tokens.
    pub target: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        Self { target: 512 }
    }
}

/// Image codec architecture. `ema_decay = 0` selects the backpropagated
/// codebook loss instead of EMA updates (TOML has no null).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub image_size: usize,
    pub channels: usize,
    pub codes: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub ema_decay: f64,
}

impl Default for VqSection {
    fn default() -> Self {
        let d = WorldConfig::default().vq_cfg;
        Self {
            image_size: d.image_size,
            channels: d.channels,
            codes: d.codes,
            code_dim: d.code_dim,
            hidden: d.hidden,
            beta: d.beta,
            ema_decay: d.ema_decay.unwrap_or(0.0),
        }
    }
}

impl VqSection {
    pub fn to_vq_config(&self) -> VqConfig {
        VqConfig {
            image_size: self.image_size,
            channels: self.channels,
            codes: self.codes,
            code_dim: self.code_dim,
            hidden: self.hidden,
            beta: self.beta,
            ema_decay: (self.ema_decay != 0.0).then_some(self.ema_decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqTrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub eval_every: u64,
    /// Fraction of frames held out for reconstruction tracking.
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for VqTrainSection {
    fn default() -> Self {
        let d = WorldConfig::default().vq_train;
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            warmup: d.warmup,
            seed: d.seed,
            eval_every: d.eval_every,
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

impl VqTrainSection {
    pub fn to_vq_train_config(&self) -> VqTrainConfig {
        VqTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

/// Synthetic world used by `sweep` and `boost-experiment`; the codec comes
/// from `[vq]`/`[vq_train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub n_scenes: usize,
    pub n_text: usize,
    pub val_scenes: usize,
    pub val_text: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let d = WorldConfig::default();
        Self {
            n_scenes: d.n_scenes,
            n_text: d.n_text,
            val_scenes: d.val_scenes,
            val_text: d.val_text,
            context: d.context,
            seed: d.seed,
        }
    }
}

impl Config {
    pub fn to_world_config(&self) -> WorldConfig {
        WorldConfig {
            n_scenes: self.world.n_scenes,
            n_text: self.world.n_text,
            val_scenes: self.world.val_scenes,
            val_text: self.world.val_text,
            bpe_size: self.bpe.target,
            context: self.world.context,
            seed: self.world.seed,
            vq_cfg: self.vq.to_vq_config(),
            vq_train: self.vq_train.to_vq_train_config(),
        }
    }

    pub fn to_eval_budget(&self) -> EvalBudget {
        EvalBudget {
            gen_prompts: self.eval.gen_prompts,
            cap_images: self.eval.cap_images,
            sample: SampleConfig { temperature: self.eval.temperature, ..SampleConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub size: String,
    pub regime: String,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub clip: f64,
    pub eval_every: u64,
    pub ckpt_every: u64,
    pub context: usize,
    /// Fraction of records held out for validation by `pretrain`/`eval`.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            size: "base".into(),
            regime: "mixed".into(),
            steps: 1000,
            batch_size: 16,
            peak_lr: 3e-4,
            warmup: 100,
            clip: 1.0,
            eval_every: 100,
            ckpt_every: 0,
            context: 256,
            val_fraction: 0.1,
            split_seed: 0,
            seed: 0,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup: self.warmup,
            clip: self.clip,
            eval_every: self.eval_every,
            ckpt_every: self.ckpt_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub temperature: f64,
    pub top_k: usize,
    pub max_text_tokens: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        let d = SampleConfig::default();
        Self {
            temperature: d.temperature,
            top_k: d.top_k,
            max_text_tokens: d.max_text_tokens,
            seed: d.seed,
        }
    }
}

impl SampleSection {
    pub fn to_sample_config(&self) -> SampleConfig {
        SampleConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_text_tokens: self.max_text_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub gen_prompts: usize,
    pub cap_images: usize,
    /// Decoding temperature for scored generation; 0 = argmax.
    pub temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalBudget::default();
        Self { gen_prompts: d.gen_prompts, cap_images: d.cap_images, temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Comma-separated ladder sizes.
    pub sizes: String,
    /// Comma-separated regimes (`text`, `t2i`, `mixed`).
    pub regimes: String,
    pub seed: u64,
    pub save_ckpt: bool,
    /// Upper bound on concurrent child runs; runs execute serially today.
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sizes: "tiny,small,base,large".into(),
            regimes: "text,t2i,mixed".into(),
            seed: 0,
            save_ckpt: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostSection {
    pub size: String,
    pub steps: u64,
    pub seed: u64,
}

impl Default for BoostSection {
    fn default() -> Self {
        Self { size: "base".into(), steps: 400, seed: 0 }
    }
}

/// Loads the config file (explicit path, else `$UNIMIX_CONFIG`, else pure
/// defaults) and applies `--set` overrides in order.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<Config> {
    let env_path = std::env::var_os(CONFIG_ENV).map(std::path::PathBuf::from);
    let chosen = path.map(Path::to_path_buf).or(env_path);
    let mut table = match &chosen {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| anyhow!("config {}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut table, s)?;
    }
    let cfg: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(cfg)
}

/// Applies one `section.key=value` override, creating tables along the path.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("--set expects key=value, got `{set}`");
    };
    let key = key.trim();
    if key.is_empty() {
        bail!("--set key is empty in `{set}`");
    }
    let mut cursor = table;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set {key}: `{part}` is not a table"))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// `--set` values are typed by shape: bool, then integer, then float, then
/// plain string.
fn parse_scalar(raw: &str) -> toml::Value {
    if raw == "true" {
        return toml::Value::Boolean(true);
    }
    if raw == "false" {
        return toml::Value::Boolean(false);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = Config::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sets_override_in_order_and_type() {
        let mut table = toml::Table::new();
        apply_set(&mut table, "train.steps=500").unwrap();
        apply_set(&mut table, "train.peak_lr=1e-3").unwrap();
        apply_set(&mut table, "sweep.save_ckpt=true").unwrap();
        apply_set(&mut table, "train.size=small").unwrap();
        apply_set(&mut table, "train.steps=600").unwrap();
        let cfg: Config = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(cfg.train.steps, 600);
        assert_eq!(cfg.train.peak_lr, 1e-3);
        assert!(cfg.sweep.save_ckpt);
        assert_eq!(cfg.train.size, "small");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut table = toml::Table::new();
        apply_set(&mut table, "train.stepz=500").unwrap();
        let err = toml::Value::Table(table).try_into::<Config>().unwrap_err().to_string();
        assert!(err.contains("stepz"), "error should name the key: {err}");
    }

    #[test]
    fn malformed_set_is_rejected() {
        let mut table = toml::Table::new();
        assert!(apply_set(&mut table, "no-equals").is_err());
        assert!(apply_set(&mut table, "=5").is_err());
    }

    #[test]
    fn ema_zero_disables_ema() {
        let s = VqSection { ema_decay: 0.0, ..VqSection::default() };
        assert_eq!(s.to_vq_config().ema_decay, None);
        assert_eq!(VqSection::default().to_vq_config().ema_decay, Some(0.99));
    }
}
