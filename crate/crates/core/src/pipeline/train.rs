//! Two-stage training.
//!
//! Stage I trains the shallow extractor, encoder and decoder to reconstruct
//! each source. Stage II keeps those weights, starts a fresh optimizer over
//! the whole network, and trains the fusion path. Each batch sample gets its
//! own tape; gradients are summed in sample order and averaged, so results
//! do not depend on the execution mode.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{crop_sampler, load_dir, synthetic_pairs, ImagePair};
use super::optim::Adam;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::exec;
use crate::loss::{stage1_loss, stage2_loss, LossBreakdown, Stage};
use crate::nn::{Ctx, TmambaModel};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LOSS_LOG_HEADER: [&str; 7] = ["stage", "epoch", "step", "lr", "intensity", "ssim_or_grad", "total"];

/// Parameter groups trained in stage I.
const STAGE1_PREFIXES: [&str; 3] = ["shallow.", "encoder.", "decoder."];

/// One optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Seed of the data stream (shuffles and crops), kept apart from the
/// weight-initialisation stream.
fn data_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Loss values, parameter gradients, and the name of the first op that
/// produced a non-finite value (if any).
pub type SampleGradients = (LossBreakdown, Vec<(ParamId, Tensor)>, Option<&'static str>);

/// Forward and backward for one sample on its own tape.
pub fn sample_gradients(
    model: &TmambaModel,
    store: &ParamStore,
    stage: Stage,
    pair: &ImagePair,
) -> Result<SampleGradients> {
    let g = Graph::with_strict_finite(false);
    let cx = Ctx::new(&g, store);
    let a = g.constant(pair.a.clone());
    let b = g.constant(pair.b.clone());
    let loss = match stage {
        Stage::I => {
            let ra = model.reconstruct(&cx, a)?;
            let rb = model.reconstruct(&cx, b)?;
            stage1_loss(&g, a, ra, b, rb)?
        }
        Stage::II => {
            let t = model.fuse(&cx, a, b, None)?;
            stage2_loss(&g, t.fused, a, b)?
        }
    };
    g.backward(loss.total)?;
    let grads = g.param_grads()?;
    let mut bad = g.first_non_finite();
    if bad.is_none() && !grads.iter().all(|(_, t)| t.all_finite()) {
        bad = Some("backward");
    }
    Ok((loss.breakdown, grads, bad))
}

fn stage_ids(store: &ParamStore, stage: Stage) -> Vec<ParamId> {
    match stage {
        Stage::I => store
            .iter()
            .filter(|(_, p)| STAGE1_PREFIXES.iter().any(|s| p.name.starts_with(s)))
            .map(|(id, _)| id)
            .collect(),
        Stage::II => store.ids().collect(),
    }
}

/// Runs both stages. `on_epoch(checkpoint, stage, epoch)` is called after
/// every completed epoch (0-based) and may persist intermediate state.
pub fn train(
    cfg: &RunConfig,
    data: &[ImagePair],
    mut on_epoch: impl FnMut(&Checkpoint, Stage, usize) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training needs at least one image pair"));
    }
    let mut ck = Checkpoint::init(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed(cfg.seed));
    let mut log = Vec::new();

    for (stage, epochs) in [(Stage::I, cfg.epochs_stage1), (Stage::II, cfg.epochs_stage2)] {
        let ids = stage_ids(&ck.store, stage);
        let mut opt = Adam::new(&ck.store, ids.iter().copied());
        let mut step = 0u64;
        for epoch in 0..epochs {
            let lr = cfg.lr_at(epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                step += 1;
                let batch = chunk
                    .iter()
                    .map(|&i| crop_sampler(&data[i], cfg.crop, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let (model, store) = (&ck.model, &ck.store);
                let results = exec::map_coarse(batch.len(), |k| {
                    sample_gradients(model, store, stage, &batch[k])
                });

                let n = batch.len() as f64;
                let mut mean = LossBreakdown {
                    stage,
                    intensity: 0.0,
                    ssim_or_grad: 0.0,
                    total: 0.0,
                };
                ck.store.zero_grads();
                for &id in &ids {
                    let shape = ck.store.value(id).shape().to_vec();
                    ck.store.accumulate_grad(id, &Tensor::zeros(&shape))?;
                }
                for r in results {
                    let (b, grads, bad) = r?;
                    if let Some(op) = bad.or((!b.total.is_finite()).then_some("loss")) {
                        return Err(Error::Diverged {
                            stage: stage.label(),
                            step,
                            op,
                        });
                    }
                    mean.intensity += b.intensity / n;
                    mean.ssim_or_grad += b.ssim_or_grad / n;
                    mean.total += b.total / n;
                    for (id, gr) in grads {
                        if ids.contains(&id) {
                            let scaled = Tensor::from_fn(gr.shape(), |i| gr.data()[i] / n);
                            ck.store.accumulate_grad(id, &scaled)?;
                        }
                    }
                }
                opt.step(&mut ck.store, lr)?;
                match stage {
                    Stage::I => ck.progress.stage1_steps += 1,
                    Stage::II => ck.progress.stage2_steps += 1,
                }
                log.push(LossRecord {
                    epoch,
                    step,
                    lr,
                    loss: mean,
                });
            }
            ck.store.zero_grads();
            ck.optimizer = Some(opt.clone());
            on_epoch(&ck, stage, epoch)?;
        }
        ck.optimizer = Some(opt);
    }
    ck.store.zero_grads();
    Ok(TrainReport { checkpoint: ck, log })
}

/// RFC-4180 loss log. Floats use the shortest exact representation so equal
/// runs produce identical bytes.
pub fn write_loss_log<W: Write>(out: W, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOSS_LOG_HEADER)?;
    for r in log {
        w.write_record([
            r.loss.stage.label().to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.loss.intensity.to_string(),
            r.loss.ssim_or_grad.to_string(),
            r.loss.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The training set named by the config: a directory of pairs, or the
/// synthetic set when no directory is given.
pub fn dataset(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    match &cfg.data_dir {
        Some(dir) => load_dir(dir),
        None => Ok(synthetic_pairs(cfg.synthetic_pairs, cfg.synthetic_size, cfg.seed)),
    }
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub periodic: Vec<PathBuf>,
}

/// Trains from a config and writes `final.tmam`, `loss_log.csv` and any
/// periodic checkpoints into `cfg.out_dir`.
pub fn run_training(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<(TrainReport, RunOutputs)> {
    let data = dataset(cfg)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut periodic = Vec::new();
    let report = train(cfg, &data, |ck, stage, epoch| {
        let steps = match stage {
            Stage::I => ck.progress.stage1_steps,
            Stage::II => ck.progress.stage2_steps,
        };
        progress(&format!("stage {} epoch {} done ({steps} steps)", stage.label(), epoch + 1));
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let p = periodic_path(out, stage, epoch);
            ck.save(&p)?;
            periodic.push(p);
        }
        Ok(())
    })?;
    let final_checkpoint = out.join("final.tmam");
    report.checkpoint.save(&final_checkpoint)?;
    let loss_log = out.join("loss_log.csv");
    write_loss_log(std::fs::File::create(&loss_log)?, &report.log)?;
    Ok((
        report,
        RunOutputs {
            final_checkpoint,
            loss_log,
            periodic,
        },
    ))
}

fn periodic_path(dir: &Path, stage: Stage, epoch: usize) -> PathBuf {
    dir.join(format!("stage{}_epoch{:03}.tmam", stage.label(), epoch + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            channels: 4,
            crop: 16,
            batch: 2,
            synthetic_pairs: 3,
            synthetic_size: 20,
            epochs_stage1: 1,
            epochs_stage2: 1,
            ..RunConfig::desk()
        }
    }

    #[test]
    fn one_epoch_each_stage() {
        let cfg = tiny();
        let data = dataset(&cfg).unwrap();
        let mut seen = Vec::new();
        let r = train(&cfg, &data, |_, s, e| {
            seen.push((s, e));
            Ok(())
        })
        .unwrap();
        // 3 pairs at batch 2 -> 2 steps per epoch
        assert_eq!(r.log.len(), 4);
        assert_eq!(seen, vec![(Stage::I, 0), (Stage::II, 0)]);
        assert_eq!(r.checkpoint.progress.stage1_steps, 2);
        assert_eq!(r.checkpoint.progress.stage2_steps, 2);
        assert!(r.log.iter().all(|l| l.loss.total.is_finite()));
        assert_eq!(r.log[2].loss.stage, Stage::II);
        assert_eq!(r.log[2].step, 1);
    }

    #[test]
    fn stage_one_leaves_fusion_weights_alone() {
        let cfg = RunConfig { epochs_stage2: 0, ..tiny() };
        let data = dataset(&cfg).unwrap();
        let fresh = Checkpoint::init(cfg.clone()).unwrap();
        let r = train(&cfg, &data, |_, _, _| Ok(())).unwrap();
        let mut moved = false;
        for ((_, a), (_, b)) in fresh.store.iter().zip(r.checkpoint.store.iter()) {
            let same = a.value.data() == b.value.data();
            if a.name.starts_with("fusion.") {
                assert!(same, "{}", a.name);
            } else if !same {
                moved = true;
            }
        }
        assert!(moved);
    }

    #[test]
    fn log_is_rfc4180_with_header() {
        let rec = LossRecord {
            epoch: 0,
            step: 1,
            lr: 2e-3,
            loss: LossBreakdown {
                stage: Stage::I,
                intensity: 0.5,
                ssim_or_grad: 0.25,
                total: 0.75,
            },
        };
        let mut buf = Vec::new();
        write_loss_log(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stage,epoch,step,lr,intensity,ssim_or_grad,total\nI,0,1,0.002,0.5,0.25,0.75\n"
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(train(&tiny(), &[], |_, _, _| Ok(())), Err(Error::Contract(_))));
    }
}
