//! Image-codec training and the encode/decode round-trip commands.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use unimix_core::checkpoint::save_vq_checkpoint;
use unimix_core::harness::split_indices;
use unimix_core::image::{from_ppm, to_ppm, ImageU8};
use unimix_core::seeding::mix_seed;
use unimix_core::vq::{init_vq, vq_decode, vq_encode, vq_train};
use unimix_core::CodeGrid;

use crate::config::Config;
use crate::manifest::Manifest;
use crate::commands::{load_dataset, load_vq, DATA_FRAMES, DATA_RECORDS};

/// Trains the image codec on a stored corpus's frames, tracking held-out
/// reconstruction quality, and saves the final checkpoint plus the loss log.
pub fn vq_train_cmd(
    cfg: &Config,
    argv: &[String],
    data_dir: &Path,
    steps: Option<u64>,
    out_dir: &Path,
) -> Result<()> {
    let mut tc = cfg.vq_train.to_vq_train_config();
    if let Some(s) = steps {
        tc.steps = s;
    }
    if tc.steps == 0 {
        bail!("vq_train.steps must be positive");
    }
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("vq-train", argv);
    m.input(&data_dir.join(DATA_RECORDS))?;
    m.input(&data_dir.join(DATA_FRAMES))?;
    m.seed("vq_init", mix_seed(tc.seed, 2));
    m.seed("vq_train", tc.seed);
    m.seed("split", cfg.vq_train.split_seed);

    let ds = load_dataset(data_dir)?;
    if ds.frames.len() == 0 {
        bail!("dataset {} holds no frames", data_dir.display());
    }
    let (train_idx, held_idx) =
        split_indices(ds.frames.len(), cfg.vq_train.val_fraction, cfg.vq_train.split_seed);
    if train_idx.is_empty() {
        bail!("vq_train.val_fraction leaves no training frames");
    }
    let frame = |i: &usize| ds.frames.frame(*i).map_err(anyhow::Error::from);
    let train: Vec<ImageU8> = train_idx.iter().map(frame).collect::<Result<_>>()?;
    let held: Vec<ImageU8> = held_idx.iter().map(frame).collect::<Result<_>>()?;

    let mut model = init_vq::<f32>(cfg.vq.to_vq_config(), mix_seed(tc.seed, 2))?;
    let log = vq_train(&mut model, &train, &held, &tc)?;

    let ckpt = out_dir.join("vq.ckpt");
    save_vq_checkpoint(&ckpt, &model, None, tc.steps)?;
    let log_path = out_dir.join("vq_log.jsonl");
    let mut w = fs::File::create(&log_path)?;
    for p in &log {
        writeln!(w, "{}", serde_json::to_string(p)?)?;
    }
    m.output(&ckpt);
    m.output(&log_path);
    m.write(cfg, out_dir)?;

    let last = log.last().context("training produced no log")?;
    let psnr = log.iter().rev().find_map(|p| p.eval_psnr);
    println!(
        "trained {} steps on {} frames ({} held out) -> {}",
        tc.steps,
        train.len(),
        held.len(),
        ckpt.display()
    );
    println!(
        "final recon {:.5} perplexity {:.1} held-out psnr {}",
        last.recon,
        last.perplexity,
        psnr.map(|p| format!("{p:.2}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Encodes one PPM image to its code grid (JSON).
pub fn vq_encode_cmd(
    cfg: &Config,
    argv: &[String],
    vq_path: &Path,
    image_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("vq-encode", argv);
    m.input(vq_path)?;
    m.input(image_path)?;

    let vq = load_vq(vq_path)?;
    let bytes = fs::read(image_path)
        .with_context(|| format!("reading image {}", image_path.display()))?;
    let img = from_ppm(&bytes)?;
    let grid = vq_encode(&vq, &img)?;
    let out = out_dir.join("grid.json");
    fs::write(&out, serde_json::to_vec_pretty(&grid)?)?;
    m.output(&out);
    m.write(cfg, out_dir)?;
    println!("encoded {}x{} pixels -> {}x{} codes at {}", img.height(), img.width(), grid.rows(), grid.cols(), out.display());
    Ok(())
}

/// Decodes a code grid (JSON) back to a PPM image.
pub fn vq_decode_cmd(
    cfg: &Config,
    argv: &[String],
    vq_path: &Path,
    grid_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut m = Manifest::new("vq-decode", argv);
    m.input(vq_path)?;
    m.input(grid_path)?;

    let vq = load_vq(vq_path)?;
    let text = fs::read_to_string(grid_path)
        .with_context(|| format!("reading grid {}", grid_path.display()))?;
    let grid: CodeGrid = serde_json::from_str(&text)
        .with_context(|| format!("parsing grid {}", grid_path.display()))?;
    let img = vq_decode(&vq, &grid)?;
    let out = out_dir.join("image.ppm");
    fs::write(&out, to_ppm(&img))?;
    m.output(&out);
    m.write(cfg, out_dir)?;
    println!("decoded {}x{} codes -> {}x{} pixels at {}", grid.rows(), grid.cols(), img.height(), img.width(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commands::data::corpus_gen_cmd;

    fn argv() -> Vec<String> {
        vec!["unimix".into(), "test".into()]
    }

    fn micro_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.vq.hidden = 8;
        cfg.vq.code_dim = 8;
        cfg.vq_train.steps = 4;
        cfg.vq_train.batch_size = 4;
        cfg.vq_train.eval_every = 2;
        cfg
    }

    #[test]
    fn codec_pipeline_roundtrips_via_files() {
        let cfg = micro_cfg();
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        corpus_gen_cmd(&cfg, &argv(), Some(8), Some(5), &data).unwrap();
        let codec = tmp.path().join("codec");
        vq_train_cmd(&cfg, &argv(), &data, None, &codec).unwrap();
        assert!(codec.join("vq.ckpt").is_file());
        assert!(codec.join("vq_log.jsonl").is_file());
        assert!(codec.join("manifest.json").is_file());

        // Render one frame to PPM, encode it, decode the grid, re-encode the
        // decoded image: grids agree with themselves through the files.
        let ds = load_dataset(&data).unwrap();
        let img = ds.frames.frame(0).unwrap();
        let ppm = tmp.path().join("frame.ppm");
        fs::write(&ppm, to_ppm(&img)).unwrap();
        let enc = tmp.path().join("enc");
        vq_encode_cmd(&cfg, &argv(), &codec.join("vq.ckpt"), &ppm, &enc).unwrap();
        let dec = tmp.path().join("dec");
        vq_decode_cmd(&cfg, &argv(), &codec.join("vq.ckpt"), &enc.join("grid.json"), &dec)
            .unwrap();
        let back = from_ppm(&fs::read(dec.join("image.ppm")).unwrap()).unwrap();
        assert_eq!((back.height(), back.width()), (img.height(), img.width()));

        let vq = load_vq(&codec.join("vq.ckpt")).unwrap();
        let g1: CodeGrid =
            serde_json::from_str(&fs::read_to_string(enc.join("grid.json")).unwrap()).unwrap();
        let g2 = vq_encode(&vq, &img).unwrap();
        assert_eq!(g1.indices(), g2.indices());
    }
}
