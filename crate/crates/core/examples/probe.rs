//! One-off calibration probe: wall-clock cost of codec training, ladder
//! training steps, validation, and image generation on this machine.

use std::time::Instant;

use unimix_core::analyze::consistency_score;
use unimix_core::generate::generate_image;
use unimix_core::harness::{build_world, WorldConfig};
use unimix_core::lm::{init_lm, LmConfig, LADDER};
use unimix_core::optim::{AdamW, AdamWConfig};
use unimix_core::trainer::{train_step, validate_lm};
use unimix_core::vq::{vq_decode, vq_encode, VqTrainConfig};
use unimix_core::{MixSpec, MixStream, SampleConfig};

fn main() {
    let vq_steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let hidden: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let t0 = Instant::now();
    let cfg = WorldConfig {
        n_scenes: 576,
        n_text: 576,
        val_scenes: 64,
        val_text: 64,
        seed: 0,
        vq_cfg: unimix_core::VqConfig { hidden, ..Default::default() },
        vq_train: VqTrainConfig { steps: vq_steps, eval_every: vq_steps / 6, ..VqTrainConfig::default() },
        ..WorldConfig::default()
    };
    let world = build_world(&cfg).expect("world");
    println!("world build ({} vq steps): {:.1}s", vq_steps, t0.elapsed().as_secs_f64());
    for p in &world.vq_log {
        println!(
            "  vq step {:>4}: recon {:.5} psnr_held {:?} perplexity {:.1}",
            p.step, p.recon, p.eval_psnr, p.perplexity
        );
    }

    // Codec roundtrip quality on held-out scenes.
    let t = Instant::now();
    let mut total = 0.0;
    let mut perfect = 0usize;
    for rec in &world.eval_scenes {
        let grid = vq_encode(&world.vq, &rec.image).unwrap();
        let recon = vq_decode(&world.vq, &grid).unwrap();
        let s = consistency_score(&rec.caption, &recon).unwrap().score;
        total += s;
        perfect += usize::from(s == 1.0);
    }
    let n = world.eval_scenes.len();
    println!(
        "vq roundtrip consistency: mean {:.3}, perfect {}/{} ({:.1}s)",
        total / n as f64,
        perfect,
        n,
        t.elapsed().as_secs_f64()
    );
    let base = unimix_core::harness::random_code_baseline(&world.vq, &world.eval_scenes, 500, 11).unwrap();
    println!("random-code baseline: consistency {:.3}, frechet {:?}", base.consistency, base.frechet);

    // Per-size training-step, validation, and generation cost.
    let mix = MixSpec::new(5, 4, 1, 7).unwrap();
    let stream = MixStream::new(&world.pools, mix).unwrap();
    for name in LADDER {
        let lm_cfg = LmConfig::by_name(name, world.vocab.total()).unwrap();
        let mut model = init_lm::<f32>(&lm_cfg, 0).unwrap();
        let mut opt = AdamW::new(&model.params, AdamWConfig::default());
        let t = Instant::now();
        let steps = 3u64;
        for s in 0..steps {
            let batch = stream.batch(s, 16);
            train_step(&mut model, &mut opt, &batch, 1e-4, 1.0, s).unwrap();
        }
        let step_s = t.elapsed().as_secs_f64() / steps as f64;
        let t = Instant::now();
        validate_lm(&model, &world.vocab, &world.val, 16).unwrap();
        let val_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let sample = SampleConfig { temperature: 0.0, ..SampleConfig::default() };
        for rec in world.eval_scenes.iter().take(2) {
            generate_image(&model, &world.vq, &world.bpe, &world.vocab, &rec.caption, 8, 8, sample)
                .unwrap();
        }
        let gen_s = t.elapsed().as_secs_f64() / 2.0;
        println!(
            "{name:>5} ({:>9} params): {step_s:.2}s/step (batch 16), val({} ex) {val_s:.1}s, {gen_s:.2}s/image",
            lm_cfg.param_count(),
            world.val.len(),
        );
    }
}
