use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use maskdec::ablate::ablate;
use maskdec::checkpoint::Checkpoint;
use maskdec::decoder::{build_variant, Variant};
use maskdec::eval::{eval_seed, evaluate, EVAL_SAMPLES};
use maskdec::export::export;
use maskdec::gradsuite::{run_suite, GradOp, SUITE_TOLERANCE};
use maskdec::train::{curve_csv, train_with, TrainConfig};
use maskdec::Rng;

/// Instances of every operation checked by `gradcheck`.
const GRAD_INSTANCES: usize = 3;

#[derive(Parser)]
#[command(name = "maskdec", version, about = "Referring-segmentation mask decoder: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_TOLERANCE)]
        tol: f64,
    },
    /// Exact learnable parameter count of the decoder.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the variant named in the config.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Trains the decoder and writes a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Scores a checkpoint on freshly generated held-out tasks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = EVAL_SAMPLES)]
        n: usize,
        /// Held-out stream; defaults to the training seed plus one.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Writes one task and the decoder's prediction as PPM/PGM images.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Trains and scores all four fusion variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = EVAL_SAMPLES)]
        n: usize,
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gradcheck(seed: u64, tol: f64) -> Result<bool> {
    let entries = run_suite(seed, GRAD_INSTANCES)?;
    let mut ok = true;
    for op in GradOp::ALL {
        let worst = entries
            .iter()
            .filter(|e| e.op == op)
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
            .expect("every op has instances");
        let pass = entries.iter().filter(|e| e.op == op).all(|e| e.passed(tol));
        ok &= pass;
        println!(
            "{:<4} {:<17} max_rel_err {:.3e} (seed {})",
            if pass { "ok" } else { "FAIL" },
            op.name(),
            worst.report.max_rel_err,
            worst.seed
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { seed, tol } => return gradcheck(seed, tol),
        Command::Params { config, variant } => {
            let cfg = load_config(&config)?;
            let decoder = match variant {
                Some(v) => cfg.decoder.with_variant(v),
                None => cfg.decoder,
            };
            let params = build_variant(&decoder, &mut Rng::new(cfg.seed))?;
            println!("{}", params.count());
        }
        Command::Train { config, out, curve } => {
            let cfg = load_config(&config)?;
            let start = Instant::now();
            let mut window = 0.0;
            let outcome = train_with(&cfg, |p| {
                window += p.loss;
                if (p.step + 1) % 100 == 0 || p.step + 1 == cfg.steps {
                    let n = (p.step % 100 + 1) as f64;
                    eprintln!(
                        "step {:>5}/{} loss {:.4} ({:.0}s)",
                        p.step + 1,
                        cfg.steps,
                        window / n,
                        start.elapsed().as_secs_f64()
                    );
                    window = 0.0;
                }
            })?;
            if let Some(path) = curve {
                write(&path, &curve_csv(&outcome.curve))?;
            }
            Checkpoint { config: cfg, model: outcome.model }
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Eval { ckpt, n, seed, report } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let seed = seed.unwrap_or_else(|| eval_seed(ckpt.config.seed));
            let json = evaluate(&ckpt, n, seed)?.to_json();
            if let Some(path) = report {
                write(&path, &json)?;
            }
            println!("{json}");
        }
        Command::Export { ckpt, seed, outdir } => {
            let ckpt = load_checkpoint(&ckpt)?;
            for path in export(&ckpt, seed, &outdir)? {
                println!("{}", path.display());
            }
        }
        Command::Ablate { config, seeds, n, report } => {
            let cfg = load_config(&config)?;
            let result = ablate(&cfg, seeds, n, |v, r| {
                eprintln!(
                    "{v:<8} seed {:<4} gIoU {}",
                    r.seed,
                    r.metrics.giou.map_or("-".into(), |g| format!("{g:.4}"))
                );
            })?;
            let json = result.to_json();
            write(&report, &json)?;
            for s in &result.variants {
                println!(
                    "{:<8} params {:>9} gIoU {}",
                    s.variant.name(),
                    s.param_count,
                    s.mean.giou.map_or("-".into(), |g| format!("{g:.4}"))
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
