//! Transposed (channel) self-attention and the transformer block built on it.
//!
//! Attention is computed between channels: `A = softmax(K·Q / α)` is `C×C`,
//! so cost grows linearly with the number of pixels.

use super::feature::{FeatureMap, Provenance};
use super::layers::{ChannelNorm, Conv, Ctx, DwConv};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId};

/// Q/K/V of one channel-attention evaluation.
///
/// `q` and `v` are `HW×C`; `k` is `C×HW`. The scale `α = exp(log_scale)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTriplet {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub log_scale: Var,
}

/// Pointwise then depthwise projection to Q, K, V plus the learnable scale.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub channels: usize,
    pub pointwise: Conv,
    pub depthwise: DwConv,
    pub log_scale: ParamId,
}

impl QkvProjection {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            pointwise: Conv::new(&mut init.sub("pw"), channels, 3 * channels, 1, 1, false)?,
            depthwise: DwConv::new(&mut init.sub("dw"), 3 * channels, false)?,
            // α starts at 1
            log_scale: init.full("log_scale", &[1], 0.0)?,
        })
    }
}

pub fn project_qkv(cx: &Ctx, x: &FeatureMap, p: &QkvProjection) -> Result<AttentionTriplet> {
    let g = cx.g;
    let (c, h, w) = x.dims(g);
    if c != p.channels {
        return Err(Error::dim(
            "project_qkv",
            format!("{c} input channels, projection built for {}", p.channels),
        ));
    }
    if h < 3 || w < 3 {
        return Err(Error::contract(format!(
            "project_qkv needs spatial dims >= 3, got {h}x{w}"
        )));
    }
    let y = p.pointwise.forward(cx, x.var)?;
    let y = p.depthwise.forward(cx, y)?;
    let flat = |i: usize| -> Result<Var> {
        let s = g.slice(y, 0, i * c, c)?;
        g.reshape(s, &[c, h * w])
    };
    let (q_ct, k, v_ct) = (flat(0)?, flat(1)?, flat(2)?);
    Ok(AttentionTriplet {
        q: g.transpose(q_ct)?,
        k,
        v: g.transpose(v_ct)?,
        log_scale: cx.p(p.log_scale),
    })
}

/// Returns `(out, A)` with `A = softmax_rows(K·Q / α)` and `out = V·Aᵀ`,
/// i.e. output channel `i` is the `A[i, :]`-weighted mix of value channels.
pub fn channel_attention(cx: &Ctx, t: &AttentionTriplet) -> Result<(Var, Var)> {
    let g = cx.g;
    let logits = g.matmul(t.k, t.q)?;
    let inv_scale = g.exp(g.neg(t.log_scale)?)?;
    let scaled = g.scale_by(logits, inv_scale)?;
    let a = g.softmax(scaled, 1)?;
    let out = apply_attention(cx, a, t.v)?;
    Ok((out, a))
}

/// `V·Aᵀ` for `V: HW×C`, `A: C×C`.
pub fn apply_attention(cx: &Ctx, a: Var, v: Var) -> Result<Var> {
    let at = cx.g.transpose(a)?;
    cx.g.matmul(v, at)
}

/// Folds `HW×C` tokens back into a `C×H×W` map.
pub fn tokens_to_map(cx: &Ctx, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let ct = cx.g.transpose(tokens)?;
    let c = cx.g.shape(ct)[0];
    cx.g.reshape(ct, &[c, h, w])
}

/// Gated depthwise feed-forward: two 1×1 projections, depthwise 3×3 on
/// each, GELU gate, elementwise product, 1×1 back to `C`.
#[derive(Clone, Debug)]
pub struct GatedFeedForward {
    pub hidden: usize,
    pub project_in: Conv,
    pub depthwise: DwConv,
    pub project_out: Conv,
}

pub const FFN_EXPANSION: usize = 2;

impl GatedFeedForward {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        let hidden = channels * FFN_EXPANSION;
        Ok(Self {
            hidden,
            project_in: Conv::new(&mut init.sub("in"), channels, 2 * hidden, 1, 1, true)?,
            depthwise: DwConv::new(&mut init.sub("dw"), 2 * hidden, true)?,
            project_out: Conv::new(&mut init.sub("out"), hidden, channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let y = self.project_in.forward(cx, x)?;
        let y = self.depthwise.forward(cx, y)?;
        let gate = g.gelu(g.slice(y, 0, 0, self.hidden)?)?;
        let val = g.slice(y, 0, self.hidden, self.hidden)?;
        self.project_out.forward(cx, g.mul(gate, val)?)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlockParams {
    pub channels: usize,
    pub norm1: ChannelNorm,
    pub qkv: QkvProjection,
    pub project_out: Conv,
    pub norm2: ChannelNorm,
    pub ffn: GatedFeedForward,
}

impl TransformerBlockParams {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            norm1: ChannelNorm::new(&mut init.sub("norm1"), channels)?,
            qkv: QkvProjection::new(&mut init.sub("qkv"), channels)?,
            project_out: Conv::new(&mut init.sub("proj"), channels, channels, 1, 1, true)?,
            norm2: ChannelNorm::new(&mut init.sub("norm2"), channels)?,
            ffn: GatedFeedForward::new(&mut init.sub("ffn"), channels)?,
        })
    }

    /// Parameters whose zeroing turns the block into the identity.
    pub fn residual_outputs(&self) -> Vec<ParamId> {
        let mut v = vec![self.project_out.weight, self.ffn.project_out.weight];
        v.extend(self.project_out.bias);
        v.extend(self.ffn.project_out.bias);
        v
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `+ FFN(LN(·))`.
pub fn transformer_block(cx: &Ctx, x: &FeatureMap, p: &TransformerBlockParams) -> Result<FeatureMap> {
    let g = cx.g;
    let (_, h, w) = x.dims(g);
    let n1 = FeatureMap::new(g, p.norm1.forward(cx, x.var)?, x.provenance)?;
    let t = project_qkv(cx, &n1, &p.qkv)?;
    let (tokens, _) = channel_attention(cx, &t)?;
    let attn = p.project_out.forward(cx, tokens_to_map(cx, tokens, h, w)?)?;
    let x1 = g.add(x.var, attn)?;
    let n2 = p.norm2.forward(cx, x1)?;
    let ffn = p.ffn.forward(cx, n2)?;
    FeatureMap::new(g, g.add(x1, ffn)?, Provenance::Transformer)
}
