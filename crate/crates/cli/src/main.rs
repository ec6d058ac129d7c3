//! `spiffnet` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spiffnet::checkpoint::Checkpoint;
use spiffnet::config::RunConfig;
use spiffnet::train::{self, LoopOptions, StepRecord};
use spiffnet::{data, gradsuite, metrics, model};

#[derive(Parser)]
#[command(name = "spiffnet", version, about = "Remote-sensing super-resolution: train, upscale, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of HR PNG images.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Super-resolve one PNG image.
    Sr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint on HR images (bicubic-degraded inputs).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        /// Per-image CSV written here.
        #[arg(long)]
        csv: PathBuf,
        /// Expected scale; defaults to the checkpoint's own.
        #[arg(long)]
        scale: Option<usize>,
        /// Also print the bicubic-upsampling baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Run in double precision (single precision otherwise).
        #[arg(long)]
        f64: bool,
    },
    /// Parameter count of a configuration.
    #[command(after_help = config_help())]
    Params {
        /// Config file path or preset name (default, toy).
        #[arg(long, default_value = "default")]
        config: String,
        /// Extra `key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Config file path or preset name (default, toy).
    #[arg(long, default_value = "default")]
    config: String,
    /// Directory of HR PNG images (non-recursive).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the log goes to `<out>.log`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint, appending to the log.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override `epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Save and stop after this many global steps.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Print a progress line every this many steps (0 = per epoch only).
    #[arg(long, default_value_t = 0)]
    every: u64,
}

fn config_help() -> String {
    format!(
        "Config keys and their defaults (`default` preset):\n{}",
        RunConfig::default()
            .to_text()
            .lines()
            .map(|l| format!("  {l}"))
            .collect::<Vec<_>>()
            .join("\n")
    )
}

fn load_config(spec: &str, sets: &[String]) -> spiffnet::Result<RunConfig> {
    let mut cfg = RunConfig::load(spec)?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| spiffnet::Error::Config(format!("expected KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> spiffnet::Result<bool> {
    match cmd {
        Command::Train(a) => {
            let mut cfg = load_config(&a.config, &a.sets)?;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let spe = cfg.train.steps_per_epoch as u64;
            let every = a.every;
            let opts = LoopOptions {
                resume: a.resume,
                stop_after: a.stop_after,
            };
            let out = train::train_loop(&cfg, &a.data, &a.out, &opts, |r: &StepRecord| {
                let show = if every > 0 { (r.step + 1) % every == 0 } else { (r.step + 1) % spe == 0 };
                if show {
                    println!("epoch {} step {} lr {:.3e} loss {:.6}", r.epoch, r.step, r.lr, r.loss);
                }
            })?;
            println!("saved {} after {} steps, log {}", a.out.display(), out.steps, out.log.display());
            Ok(true)
        }
        Command::Sr { ckpt, input, output } => {
            let m = Checkpoint::load(&ckpt)?.model()?;
            let lr = data::load_image(&input)?;
            let sr = m.super_resolve(&lr)?;
            data::save_image(&sr, &output)?;
            let s = sr.shape();
            println!("wrote {} ({}x{})", output.display(), s[1], s[0]);
            Ok(true)
        }
        Command::Eval {
            ckpt,
            hr_dir,
            csv,
            scale,
            baseline,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let r = match scale {
                Some(r) => r,
                None => ck.model_config()?.scale,
            };
            let rows = train::evaluate(&ck, &hr_dir, r)?;
            std::fs::write(&csv, metrics::csv_report(&rows))?;
            let (p, s) = metrics::mean_scores(&rows);
            println!("images {} mean psnr {p:.4} dB ssim {s:.6}", rows.len());
            if baseline {
                let base = train::evaluate_bicubic(&train::load_dataset(&hr_dir)?, r)?;
                let (p, s) = metrics::mean_scores(&base);
                println!("bicubic mean psnr {p:.4} dB ssim {s:.6}");
            }
            Ok(true)
        }
        Command::Gradcheck { seed, f64 } => {
            let entries = if f64 {
                gradsuite::run::<f64>(seed)?
            } else {
                gradsuite::run::<f32>(seed)?
            };
            let mut ok = true;
            for e in &entries {
                let verdict = if e.passed() { "PASS" } else { "FAIL" };
                ok &= e.passed();
                println!(
                    "{:<16} n={} max_rel_err={:.3e} tol={:.0e} {verdict}",
                    e.name, e.instances, e.max_rel_err, e.tolerance
                );
            }
            let precision = if f64 { "f64" } else { "f32" };
            println!("{} {precision}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                eprintln!("error: gradient check failed");
            }
            Ok(ok)
        }
        Command::Params { config, sets } => {
            let cfg = load_config(&config, &sets)?;
            let m = model::Model::<f32>::init(cfg.model, 0)?;
            println!("{}", m.param_count());
            for (name, n) in m.breakdown() {
                println!("  {name:<12} {n}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
