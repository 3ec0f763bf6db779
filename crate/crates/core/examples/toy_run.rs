//! Trains the desk-scale toy configuration and prints the end-to-end
//! numbers: stage-I loss drop, fused intensity error against the better
//! single source, and edge preservation.
//!
//! `cargo run --release -p tmamba --example toy_run [lr] [seed]`

use std::time::Instant;

use tmamba::loss::{fusion_intensity, Stage};
use tmamba::metrics::metric_qabf;
use tmamba::pipeline::{fuse_pair, synthetic_pairs, train, RunConfig};

fn main() -> tmamba::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    if let Some(lr) = args.next() {
        cfg.lr = lr.parse().expect("lr");
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed");
    }
    let data = synthetic_pairs(cfg.synthetic_pairs, cfg.synthetic_size, cfg.seed);
    let t0 = Instant::now();
    let report = train(&cfg, &data, |_, s, e| {
        if (e + 1) % 10 == 0 {
            eprintln!("stage {} epoch {} ({:.0?})", s.label(), e + 1, t0.elapsed());
        }
        Ok(())
    })?;
    let epoch_mean = |stage: Stage, epoch: usize| {
        let xs: Vec<f64> = report
            .log
            .iter()
            .filter(|r| r.loss.stage == stage && r.epoch == epoch)
            .map(|r| r.loss.total)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let (first, last) = (epoch_mean(Stage::I, 0), epoch_mean(Stage::I, cfg.epochs_stage1 - 1));
    println!("stage I: first epoch {first:.4}, last epoch {last:.4}, drop {:.1}%", 100.0 * (1.0 - last / first));
    let (s2a, s2b) = (epoch_mean(Stage::II, 0), epoch_mean(Stage::II, cfg.epochs_stage2 - 1));
    println!("stage II: first epoch {s2a:.4}, last epoch {s2b:.4}");

    let ck = &report.checkpoint;
    let (mut fi, mut best, mut qf, mut qa) = (0.0, 0.0, 0.0, 0.0);
    for p in &data {
        let f8 = fuse_pair(ck, p)?;
        let f = f8.to_tensor();
        let (a, b) = (p.a8().to_tensor(), p.b8().to_tensor());
        fi += fusion_intensity(&f, &a, &b)?;
        best += fusion_intensity(&a, &a, &b)?.min(fusion_intensity(&b, &a, &b)?);
        qf += metric_qabf(&f8, &p.a8(), &p.b8())?;
        qa += metric_qabf(&p.a8(), &p.a8(), &p.b8())?;
    }
    let n = data.len() as f64;
    println!(
        "intensity: fused {:.4} vs best single {:.4} (ratio {:.3}); qabf fused {:.4} vs a {:.4}",
        fi / n,
        best / n,
        fi / best,
        qf / n,
        qa / n
    );
    println!("elapsed {:.1?}", t0.elapsed());
    Ok(())
}
