//! Cross-modal fusion: attention-level interaction, the two fusion blocks,
//! and the decoder.

use super::attention::{
    apply_attention, channel_attention, project_qkv, tokens_to_map, transformer_block,
    AttentionTriplet, QkvProjection, TransformerBlockParams,
};
use super::feature::{same_dims, FeatureMap, Provenance};
use super::layers::{ChannelNorm, Conv, Ctx, Linear};
use super::tmamba::{BlockArch, BranchLayout, TmambaBlockParams, Want};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId};
use crate::tensor::Tensor;

pub const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Densely connected dilated 3×3 stack followed by a 1×1 transition back to `C`.
#[derive(Clone, Debug)]
pub struct DenseAspp {
    pub layers: Vec<Conv>,
    pub transition: Conv,
}

impl DenseAspp {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, &d) in ASPP_DILATIONS.iter().enumerate() {
            let c_in = channels * (i + 1);
            layers.push(Conv::new(&mut init.sub(&format!("layer{i}")), c_in, channels, 3, d, true)?);
        }
        let c_all = channels * (ASPP_DILATIONS.len() + 1);
        Ok(Self {
            layers,
            transition: Conv::new(&mut init.sub("transition"), c_all, channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let mut feats = vec![x];
        for layer in &self.layers {
            let inp = if feats.len() == 1 { x } else { g.concat(&feats, 0)? };
            feats.push(g.silu(layer.forward(cx, inp)?)?);
        }
        self.transition.forward(cx, g.concat(&feats, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct AsppWeightParams {
    pub channels: usize,
    /// Shared by both modalities.
    pub encoder: DenseAspp,
    /// `[2C] → [2]`; the first C inputs come from the visible feature.
    pub fc: Linear,
}

impl AsppWeightParams {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            encoder: DenseAspp::new(&mut init.sub("aspp"), channels)?,
            fc: Linear::new(&mut init.sub("fc"), 2 * channels, 2)?,
        })
    }
}

/// One QKV projection applied to both modalities; the visible path is
/// scaled by the projection's own `α`, the infrared path by `β`.
#[derive(Clone, Debug)]
pub struct CrossModalParams {
    pub norm: ChannelNorm,
    pub qkv: QkvProjection,
    pub log_beta: ParamId,
    pub weights: AsppWeightParams,
}

impl CrossModalParams {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: ChannelNorm::new(&mut init.sub("norm"), channels)?,
            qkv: QkvProjection::new(&mut init.sub("qkv"), channels)?,
            log_beta: init.full("log_beta", &[1], 0.0)?,
            weights: AsppWeightParams::new(&mut init.sub("weights"), channels)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModalityAttentions {
    pub a_v: Var,
    pub a_i: Var,
    pub v_v: Var,
    pub v_i: Var,
}

pub fn modality_attentions(
    cx: &Ctx,
    phi_v: &FeatureMap,
    phi_i: &FeatureMap,
    p: &CrossModalParams,
) -> Result<ModalityAttentions> {
    let g = cx.g;
    same_dims(g, "modality_attentions", phi_v, phi_i)?;
    let project = |x: &FeatureMap| -> Result<AttentionTriplet> {
        let n = FeatureMap::new(g, p.norm.forward(cx, x.var)?, x.provenance)?;
        project_qkv(cx, &n, &p.qkv)
    };
    let tv = project(phi_v)?;
    let mut ti = project(phi_i)?;
    ti.log_scale = cx.p(p.log_beta);
    let (_, a_v) = channel_attention(cx, &tv)?;
    let (_, a_i) = channel_attention(cx, &ti)?;
    Ok(ModalityAttentions {
        a_v,
        a_i,
        v_v: tv.v,
        v_i: ti.v,
    })
}

/// Global average pool of a `C×H×W` map to `[C]`.
fn global_pool(cx: &Ctx, x: Var) -> Result<Var> {
    let g = cx.g;
    let s = g.shape(x);
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.mean_axis(flat, 1)
}

/// Returns `(A, w1, w2)` with `A = w1·A_V + w2·A_I`.
///
/// `forced` replaces the learned weights with constants (a test hook).
pub fn attention_weighting(
    cx: &Ctx,
    phi_v: &FeatureMap,
    phi_i: &FeatureMap,
    a_v: Var,
    a_i: Var,
    wp: &AsppWeightParams,
    forced: Option<(f64, f64)>,
) -> Result<(Var, Var, Var)> {
    let g = cx.g;
    same_dims(g, "attention_weighting", phi_v, phi_i)?;
    let (sa, sb) = (g.shape(a_v), g.shape(a_i));
    if sa.len() != 2 || sa[0] != sa[1] || sa != sb {
        return Err(Error::dim("attention_weighting", format!("A_V {sa:?}, A_I {sb:?}")));
    }
    let (w1, w2) = match forced {
        Some((w1, w2)) => (
            g.constant(Tensor::scalar(w1)),
            g.constant(Tensor::scalar(w2)),
        ),
        None => {
            let ev = global_pool(cx, wp.encoder.forward(cx, phi_v.var)?)?;
            let ei = global_pool(cx, wp.encoder.forward(cx, phi_i.var)?)?;
            let pooled = g.reshape(g.concat(&[ev, ei], 0)?, &[1, 2 * wp.channels])?;
            let logits = wp.fc.forward(cx, pooled)?;
            let w = g.reshape(g.softmax(logits, 1)?, &[2])?;
            (g.slice(w, 0, 0, 1)?, g.slice(w, 0, 1, 1)?)
        }
    };
    let a = g.add(g.scale_by(a_v, w1)?, g.scale_by(a_i, w2)?)?;
    Ok((a, w1, w2))
}

/// `V_I·Aᵀ + V_V·Aᵀ` folded to `C×H×W`.
pub fn prefuse_transformer(cx: &Ctx, a: Var, v_i: Var, v_v: Var, h: usize, w: usize) -> Result<FeatureMap> {
    let g = cx.g;
    let (si, sv) = (g.shape(v_i), g.shape(v_v));
    if si != sv || si.len() != 2 || si[0] != h * w {
        return Err(Error::dim(
            "prefuse_transformer",
            format!("V_I {si:?}, V_V {sv:?}, map {h}x{w}"),
        ));
    }
    let sum = g.add(apply_attention(cx, a, v_i)?, apply_attention(cx, a, v_v)?)?;
    FeatureMap::new(g, tokens_to_map(cx, sum, h, w)?, Provenance::Prefused)
}

/// Per-modality attention followed by an elementwise add (no shared `A`).
pub fn prefuse_separate(cx: &Ctx, m: &ModalityAttentions, h: usize, w: usize) -> Result<FeatureMap> {
    let g = cx.g;
    let sum = g.add(apply_attention(cx, m.a_i, m.v_i)?, apply_attention(cx, m.a_v, m.v_v)?)?;
    FeatureMap::new(g, tokens_to_map(cx, sum, h, w)?, Provenance::Prefused)
}

pub fn prefuse_mamba(cx: &Ctx, phi_i: &FeatureMap, phi_v: &FeatureMap) -> Result<FeatureMap> {
    let g = cx.g;
    phi_i.expect(&[Provenance::Mamba], "prefuse_mamba")?;
    phi_v.expect(&[Provenance::Mamba], "prefuse_mamba")?;
    same_dims(g, "prefuse_mamba", phi_i, phi_v)?;
    FeatureMap::new(g, g.add(phi_i.var, phi_v.var)?, Provenance::Prefused)
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub inputs: usize,
    pub reduce: Conv,
    pub block: TransformerBlockParams,
    pub head: Conv,
}

impl DecoderParams {
    /// `inputs` is the number of `C`-channel maps concatenated at the input.
    pub fn new(init: &mut Init, channels: usize, inputs: usize) -> Result<Self> {
        Ok(Self {
            inputs,
            reduce: Conv::new(&mut init.sub("reduce"), inputs * channels, channels, 1, 1, true)?,
            block: TransformerBlockParams::new(&mut init.sub("block"), channels)?,
            head: Conv::new(&mut init.sub("head"), channels, 1, 1, 1, true)?,
        })
    }
}

pub fn decode(
    cx: &Ctx,
    phi_t: Option<&FeatureMap>,
    phi_m: Option<&FeatureMap>,
    p: &DecoderParams,
) -> Result<Var> {
    let g = cx.g;
    let maps: Vec<&FeatureMap> = phi_t.into_iter().chain(phi_m).collect();
    if maps.len() != p.inputs {
        return Err(Error::contract(format!(
            "decoder built for {} inputs, got {}",
            p.inputs,
            maps.len()
        )));
    }
    for m in &maps {
        m.expect(
            &[Provenance::Transformer, Provenance::Mamba, Provenance::Fused],
            "decode",
        )?;
    }
    if let [a, b] = maps[..] {
        same_dims(g, "decode", a, b)?;
    }
    let vars: Vec<Var> = maps.iter().map(|m| m.var).collect();
    let cat = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 0)? };
    let x = FeatureMap::new(g, p.reduce.forward(cx, cat)?, Provenance::Fused)?;
    let x = transformer_block(cx, &x, &p.block)?;
    g.sigmoid(p.head.forward(cx, x.var)?)
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// Present when the transformer branch is enabled.
    pub cross: Option<CrossModalParams>,
    pub fuse_t: Option<TmambaBlockParams>,
    pub fuse_m: Option<TmambaBlockParams>,
}

impl FusionParams {
    pub fn new(init: &mut Init, arch: &BlockArch, layout: BranchLayout) -> Result<Self> {
        let (cross, fuse_t) = if layout.transformer {
            (
                Some(CrossModalParams::new(&mut init.sub("cross"), arch.channels)?),
                Some(TmambaBlockParams::new(&mut init.sub("fuse_t"), arch, layout)?),
            )
        } else {
            (None, None)
        };
        let fuse_m = if layout.mamba.is_some() {
            Some(TmambaBlockParams::new(&mut init.sub("fuse_m"), arch, layout)?)
        } else {
            None
        };
        Ok(Self {
            cross,
            fuse_t,
            fuse_m,
        })
    }
}

/// `(F_T(P_T), F_M(P_M))`: each block keeps only its own branch's output.
pub fn tmamba_fuse(
    cx: &Ctx,
    p_t: Option<&FeatureMap>,
    p_m: Option<&FeatureMap>,
    p: &FusionParams,
) -> Result<(Option<FeatureMap>, Option<FeatureMap>)> {
    let run = |x: Option<&FeatureMap>, blk: Option<&TmambaBlockParams>, want: Want| -> Result<Option<FeatureMap>> {
        match (x, blk) {
            (Some(x), Some(blk)) => {
                x.expect(&[Provenance::Prefused], "tmamba_fuse")?;
                let out = blk.forward_pair(cx, x, x, want)?;
                let f = if want.transformer { out.transformer } else { out.mamba };
                Ok(f.map(|f| f.with(Provenance::Fused)))
            }
            (None, None) => Ok(None),
            _ => Err(Error::contract("tmamba_fuse: input and block presence disagree")),
        }
    };
    let ft = run(p_t, p.fuse_t.as_ref(), Want::TRANSFORMER)?;
    let fm = run(p_m, p.fuse_m.as_ref(), Want::MAMBA)?;
    Ok((ft, fm))
}
