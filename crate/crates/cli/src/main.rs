use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tmamba::complexity;
use tmamba::exec::{self, ExecMode};
use tmamba::gradcheck;
use tmamba::metrics::{write_metrics_csv, MetricsReport};
use tmamba::pipeline::data::write_pairs;
use tmamba::pipeline::infer::{fuse_mode, save_fused};
use tmamba::pipeline::{evaluate, fuse_pair, load_dir, load_pair, run_training, synthetic_pairs, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "tmamba", version, about = "Train, run and evaluate the Tmamba image-fusion network")]
struct Cli {
    /// Run all data-parallel work on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fuse one image pair.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        /// Modality A (infrared / MRI).
        #[arg(long)]
        a: PathBuf,
        /// Modality B (visible / CT / PET / SPECT); its chroma is kept when it is colour.
        #[arg(long)]
        b: PathBuf,
        /// `.png` or `.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse every pair under `DIR/a` and `DIR/b` and write a metrics table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and block.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::SUITE_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Operation counts of both token mixers against token count.
    Bench {
        #[arg(long, default_value_t = 8)]
        channels: usize,
    },
    /// Write a synthetic paired dataset as PGM files under `DIR/a` and `DIR/b`.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        exec::set_mode(ExecMode::Sequential);
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the command ran but its check failed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { config, out_dir } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let (report, out) = run_training(&cfg, |msg| eprintln!("{msg}"))?;
            if let (Some(first), Some(last)) = (report.log.first(), report.log.last()) {
                eprintln!("first step loss {:.4}, last step loss {:.4}", first.loss.total, last.loss.total);
            }
            println!("{}", out.final_checkpoint.display());
            println!("{}", out.loss_log.display());
            for p in out.periodic {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Fuse { ckpt, a, b, out } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let pair = load_pair(&a, &b)?;
            let fused = fuse_pair(&ck, &pair)?;
            save_fused(&out, &fused, &pair)?;
            eprintln!("{:?} mode, {}x{}", fuse_mode(&ck), fused.width(), fused.height());
            Ok(true)
        }
        Command::Eval { ckpt, dir, out } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let pairs = load_dir(&dir)?;
            let rows = evaluate(&ck, &pairs)?;
            match out {
                Some(p) => write_metrics_csv(File::create(&p)?, &rows)?,
                None => write_metrics_csv(io::stdout().lock(), &rows)?,
            }
            if let Some(m) = MetricsReport::mean(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>()) {
                eprintln!("{} pairs, mean qabf {:.4}", rows.len(), m.qabf);
            }
            Ok(true)
        }
        Command::Gradcheck { cases, seed } => {
            let report = gradcheck::run_suite(cases, seed)?;
            let mut so = io::stdout().lock();
            for line in report.lines() {
                writeln!(so, "{line}")?;
            }
            let failed = report.checks.iter().filter(|c| !c.passed()).count();
            writeln!(
                so,
                "{} checks, {failed} failed, relative tolerance {:e}, {:.1?}",
                report.checks.len(),
                gradcheck::REL_TOL,
                report.elapsed
            )?;
            Ok(report.passed())
        }
        Command::Bench { channels } => {
            let rows = complexity::measure_all(channels)?;
            print!("{}", complexity::table(&rows));
            Ok(rows.iter().all(complexity::Scaling::linear))
        }
        Command::Synth { dir, count, size, seed } => {
            write_pairs(&dir, &synthetic_pairs(count, size, seed))?;
            println!("{count} pairs of {size}x{size} written to {}", dir.display());
            Ok(true)
        }
    }
}
