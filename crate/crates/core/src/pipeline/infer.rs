//! Fusing pairs with a trained model and scoring the results.

use std::path::Path;

use super::checkpoint::Checkpoint;
use super::data::ImagePair;
use super::image_io::write_image;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{Gray8, MetricsReport};
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Whether a checkpoint fuses through the trained fusion path or, having
/// seen no stage-II steps, through its reconstruction path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Fusion,
    /// Each source is reconstructed and the elementwise maximum is taken.
    Restoration,
}

pub fn fuse_mode(ck: &Checkpoint) -> FuseMode {
    if ck.progress.stage2_steps == 0 {
        FuseMode::Restoration
    } else {
        FuseMode::Fusion
    }
}

/// Full forward pass on `1×H×W` sources in `[0, 1]`.
pub fn fuse_tensors(ck: &Checkpoint, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Pairing(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let g = Graph::new();
    let cx = Ctx::new(&g, &ck.store);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    match fuse_mode(ck) {
        FuseMode::Fusion => {
            let out = ck.model.fuse(&cx, va, vb, None)?.fused;
            let t = g.value(out).clone();
            Ok(t)
        }
        FuseMode::Restoration => {
            let ra = ck.model.reconstruct(&cx, va)?;
            let rb = ck.model.reconstruct(&cx, vb)?;
            let (ra, rb) = (g.value(ra), g.value(rb));
            Ok(Tensor::from_fn(ra.shape(), |i| ra.data()[i].max(rb.data()[i])))
        }
    }
}

pub fn fuse_pair(ck: &Checkpoint, pair: &ImagePair) -> Result<Gray8> {
    Gray8::quantize(&fuse_tensors(ck, &pair.a, &pair.b)?)
}

/// Writes a fused plane, recombined with the pair's chroma when present.
pub fn save_fused(path: &Path, fused: &Gray8, pair: &ImagePair) -> Result<()> {
    write_image(path, fused, pair.chroma.as_ref())
}

/// Fuses and scores every pair. Pairs are processed concurrently; rows come
/// back in input order.
pub fn evaluate(ck: &Checkpoint, pairs: &[ImagePair]) -> Result<Vec<(String, MetricsReport)>> {
    exec::map_coarse(pairs.len(), |i| {
        let p = &pairs[i];
        let f = fuse_pair(ck, p)?;
        Ok((p.id.clone(), MetricsReport::compute(&f, &p.a8(), &p.b8())?))
    })
    .into_iter()
    .collect()
}
