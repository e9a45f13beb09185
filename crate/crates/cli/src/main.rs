//! `unimix`: one binary binding every pipeline stage — corpus synthesis,
//! tokenizer training, model pretraining, generation, and the experiment
//! suite. Exit codes: 0 success, 1 validation/runtime failure (the message
//! names the offending key), 2 usage errors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "unimix", version, about = "text+image next-token modeling over one shared vocabulary")]
struct Cli {
    /// TOML config file; `$UNIMIX_CONFIG` is used when the flag is absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set train.steps=500
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene+text corpus and save the container
    CorpusGen {
        /// Scene count and standalone-text count (defaults from [corpus])
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the byte-pair text tokenizer on a stored corpus
    BpeTrain {
        #[arg(long)]
        data: PathBuf,
        /// Total vocabulary size including the 256 byte tokens
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the image codec on a stored corpus's frames
    VqTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one PPM image to its code grid (JSON)
    VqEncode {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a code grid (JSON) back to a PPM image
    VqDecode {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume) one model on a stored corpus under a regime
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        /// Ladder size: tiny, small, base, large
        #[arg(long)]
        size: Option<String>,
        /// Data regime: text, t2i, mixed
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint already in --out
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a caption to an image
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Code-grid rows (defaults to the codec's native grid)
        #[arg(long)]
        rows: Option<usize>,
        /// Code-grid columns (defaults to the codec's native grid)
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a PPM image
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a stored corpus's validation split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (size, regime) cell at one budget; write the record table
    Sweep {
        /// Comma-separated ladder sizes (defaults from [sweep])
        #[arg(long)]
        sizes: Option<String>,
        /// Comma-separated regimes (defaults from [sweep])
        #[arg(long)]
        regimes: Option<String>,
        /// Upper bound on concurrent child runs
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive the mixing trade-off table from a completed sweep
    TradeoffReport {
        /// Directory holding sweep.json
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare baseline/add-t2i/add-i2t mixes at equal budgets
    BoostExperiment {
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Usage problems exit 2; --help/--version exit 0 (clap's defaults).
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli, &argv) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    let cfg = config::load_config(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::CorpusGen { n, seed, out } => {
            commands::corpus_gen_cmd(&cfg, argv, *n, *seed, out)
        }
        Command::BpeTrain { data, target, out } => {
            commands::bpe_train_cmd(&cfg, argv, data, *target, out)
        }
        Command::VqTrain { data, steps, out } => {
            commands::vq_train_cmd(&cfg, argv, data, *steps, out)
        }
        Command::VqEncode { vq, image, out } => {
            commands::vq_encode_cmd(&cfg, argv, vq, image, out)
        }
        Command::VqDecode { vq, grid, out } => {
            commands::vq_decode_cmd(&cfg, argv, vq, grid, out)
        }
        Command::Pretrain { data, bpe, vq, size, regime, steps, resume, out } => {
            commands::pretrain_cmd(
                &cfg,
                argv,
                data,
                bpe,
                vq,
                size.as_deref(),
                regime.as_deref(),
                *steps,
                *resume,
                out,
            )
        }
        Command::Generate { model, vq, bpe, prompt, rows, cols, out } => {
            commands::generate_cmd(&cfg, argv, model, vq, bpe, prompt, *rows, *cols, out)
        }
        Command::Caption { model, vq, bpe, image, out } => {
            commands::caption_cmd(&cfg, argv, model, vq, bpe, image, out)
        }
        Command::Eval { data, bpe, vq, model, out } => {
            commands::eval_cmd(&cfg, argv, data, bpe, vq, model, out)
        }
        Command::Sweep { sizes, regimes, jobs, out } => {
            commands::sweep_cmd(&cfg, argv, sizes.as_deref(), regimes.as_deref(), *jobs, out)
        }
        Command::TradeoffReport { sweep, out } => {
            commands::tradeoff_report_cmd(&cfg, argv, sweep, out)
        }
        Command::BoostExperiment { size, steps, out } => {
            commands::boost_experiment_cmd(&cfg, argv, size.as_deref(), *steps, out)
        }
    }
}
