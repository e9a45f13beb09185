//! Experiment commands: the size×regime sweep, the trade-off report derived
//! from it, and the mutual-boost comparison. All three build the same
//! self-contained synthetic world from the `[world]`/`[vq*]` config sections.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use unimix_core::harness::{
    build_world, mutual_boost_experiment, run_sweep, tradeoff_report, BoostBudgets,
    ExperimentWorld, Regime, RunSettings, SweepRecord, TradeoffReport,
};

use crate::config::Config;
use crate::manifest::Manifest;
use crate::commands::{parse_list, parse_regime, parse_size};

fn build_world_logged(cfg: &Config) -> Result<ExperimentWorld> {
    let wc = cfg.to_world_config();
    eprintln!(
        "building world: {} scenes + {} texts, codec {} steps ...",
        wc.n_scenes, wc.n_text, wc.vq_train.steps
    );
    let world = build_world(&wc)?;
    let psnr = world.vq_log.iter().rev().find_map(|p| p.eval_psnr);
    eprintln!(
        "world ready: vocab {}, {} val examples, codec held-out psnr {}",
        world.vocab.total(),
        world.val.len(),
        psnr.map(|p| format!("{p:.2}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(world)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Trains every requested (size, regime) cell at one budget and writes the
/// record table. `jobs` bounds child parallelism; runs execute serially.
pub fn sweep_cmd(
    cfg: &Config,
    argv: &[String],
    sizes: Option<&str>,
    regimes: Option<&str>,
    jobs: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let sizes = parse_list(sizes.unwrap_or(&cfg.sweep.sizes), "sweep.sizes", parse_size)?;
    let regimes: Vec<Regime> =
        parse_list(regimes.unwrap_or(&cfg.sweep.regimes), "sweep.regimes", parse_regime)?;
    let jobs = jobs.unwrap_or(cfg.sweep.jobs);
    if jobs == 0 {
        bail!("sweep.jobs must be at least 1");
    }
    // Duplicate cells would collide on one run directory.
    fn first_dup<T: PartialEq>(xs: &[T]) -> Option<&T> {
        xs.iter().enumerate().find(|(i, x)| xs[..*i].contains(x)).map(|(_, x)| x)
    }
    if let Some(d) = first_dup(&sizes) {
        bail!("sweep.sizes lists `{d}` twice");
    }
    if let Some(d) = first_dup(&regimes) {
        bail!("sweep.regimes lists `{}` twice", d.as_str());
    }
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("sweep", argv);
    m.seed("world", cfg.world.seed);
    m.seed("sweep", cfg.sweep.seed);

    let world = build_world_logged(cfg)?;
    let tc = cfg.train.to_train_config();
    let eval = cfg.to_eval_budget();
    let settings = RunSettings {
        tc: &tc,
        eval: &eval,
        seed: cfg.sweep.seed,
        out_dir,
        save_ckpt: cfg.sweep.save_ckpt,
    };
    let records = run_sweep(&world, &sizes, &regimes, &settings)?;

    m.output(&out_dir.join("sweep.csv"));
    m.output(&out_dir.join("sweep.json"));
    m.write(cfg, out_dir)?;

    println!("{:<7} {:<10} {:>10} {:>10} {:>8} {:>8}", "size", "regime", "val_text", "val_image", "consis", "caption");
    for r in &records {
        if r.failed {
            println!("{:<7} {:<10} FAILED: {}", r.size, r.regime.as_str(), r.error.as_deref().unwrap_or("?"));
            continue;
        }
        println!(
            "{:<7} {:<10} {:>10} {:>10} {:>8} {:>8}",
            r.size,
            r.regime.as_str(),
            fmt_opt(r.val_loss_text),
            fmt_opt(r.val_loss_image),
            fmt_opt(r.consistency),
            fmt_opt(r.caption_accuracy),
        );
    }
    println!("wrote {} runs to {}", records.len(), out_dir.join("sweep.csv").display());
    Ok(())
}

fn read_sweep_records(sweep_dir: &Path) -> Result<Vec<SweepRecord>> {
    let path = sweep_dir.join("sweep.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading sweep records {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Derives the mixing trade-off table from a completed sweep's records.
pub fn tradeoff_report_cmd(
    cfg: &Config,
    argv: &[String],
    sweep_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("tradeoff-report", argv);
    m.input(&sweep_dir.join("sweep.json"))?;

    let records = read_sweep_records(sweep_dir)?;
    let report: TradeoffReport = tradeoff_report(&records)?;
    let path = out_dir.join("tradeoff.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    m.output(&path);
    m.write(cfg, out_dir)?;

    println!("{:<7} {:>10} {:>12} {:>12}", "size", "params", "delta_lang", "delta_gen");
    for row in &report.rows {
        println!(
            "{:<7} {:>10} {:>12.4} {:>12.4}",
            row.size, row.param_count, row.delta_lang, row.delta_gen
        );
    }
    println!("verdict: {:?}", report.verdict);
    println!("wrote {}", path.display());
    Ok(())
}

/// Trains baseline/add-t2i/add-i2t mixes of one size at equal budgets and
/// reports both generation and captioning quality.
pub fn boost_experiment_cmd(
    cfg: &Config,
    argv: &[String],
    size: Option<&str>,
    steps: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let size = parse_size(size.unwrap_or(&cfg.boost.size))?;
    let steps = steps.unwrap_or(cfg.boost.steps);
    if steps == 0 {
        bail!("boost.steps must be positive");
    }
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("boost-experiment", argv);
    m.seed("world", cfg.world.seed);
    m.seed("boost", cfg.boost.seed);

    let world = build_world_logged(cfg)?;
    let tc = cfg.train.to_train_config();
    let eval = cfg.to_eval_budget();
    let table = mutual_boost_experiment(
        &world,
        size,
        BoostBudgets::equal(steps),
        &tc,
        &eval,
        cfg.boost.seed,
        out_dir,
    )?;

    m.output(&out_dir.join("boost.json"));
    m.write(cfg, out_dir)?;
    println!("{:<9} {:>7} {:>10} {:>10} {:>8} {:>8}", "mix", "ratios", "val_text", "val_image", "consis", "caption");
    for r in &table.rows {
        println!(
            "{:<9} {:>1}:{}:{} {:>10} {:>10} {:>8.3} {:>8.3}",
            r.mix,
            r.ratios.0,
            r.ratios.1,
            r.ratios.2,
            fmt_opt(r.val_loss_text),
            fmt_opt(r.val_loss_image),
            r.consistency,
            r.caption_accuracy,
        );
    }
    println!("wrote {}", out_dir.join("boost.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv() -> Vec<String> {
        vec!["unimix".into(), "test".into()]
    }

    /// World small enough for command-level smoke tests.
    fn micro_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.world.n_scenes = 24;
        cfg.world.n_text = 24;
        cfg.world.val_scenes = 4;
        cfg.world.val_text = 4;
        cfg.bpe.target = 280;
        cfg.vq.hidden = 8;
        cfg.vq.code_dim = 8;
        cfg.vq.codes = 32;
        cfg.vq_train.steps = 4;
        cfg.vq_train.batch_size = 4;
        cfg.train.steps = 2;
        cfg.train.batch_size = 2;
        cfg.train.eval_every = 0;
        cfg.eval.gen_prompts = 2;
        cfg.eval.cap_images = 2;
        cfg.boost.steps = 2;
        cfg.boost.size = "tiny".into();
        cfg
    }

    #[test]
    fn sweep_then_tradeoff_via_files() {
        let cfg = micro_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let sweep_dir = tmp.path().join("sweep");
        sweep_cmd(&cfg, &argv(), Some("tiny"), None, None, &sweep_dir).unwrap();
        assert!(sweep_dir.join("sweep.csv").is_file());
        assert!(sweep_dir.join("sweep.json").is_file());
        assert!(sweep_dir.join("manifest.json").is_file());
        for regime in ["text-only", "t2i-only", "mixed"] {
            assert!(sweep_dir.join(format!("tiny_{regime}")).join("metrics.jsonl").is_file());
            assert!(sweep_dir.join(format!("tiny_{regime}")).join("series.csv").is_file());
        }
        let report_dir = tmp.path().join("report");
        tradeoff_report_cmd(&cfg, &argv(), &sweep_dir, &report_dir).unwrap();
        assert!(report_dir.join("tradeoff.json").is_file());
    }

    #[test]
    fn sweep_rejects_bad_lists() {
        let cfg = micro_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let err = sweep_cmd(&cfg, &argv(), Some("tiny,huge"), None, None, &out)
            .unwrap_err()
            .to_string();
        assert!(err.contains("huge"), "{err}");
        let err = sweep_cmd(&cfg, &argv(), Some("tiny,tiny"), None, None, &out)
            .unwrap_err()
            .to_string();
        assert!(err.contains("twice"), "{err}");
        let err =
            sweep_cmd(&cfg, &argv(), None, None, Some(0), &out).unwrap_err().to_string();
        assert!(err.contains("sweep.jobs"), "{err}");
    }
}
