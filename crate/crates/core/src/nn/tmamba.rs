//! The dual-branch block: two transformer layers and two state-space layers
//! with a two-way hand-off between them.
//!
//! ```text
//! trans = T1(x)          vm = M1(x)
//! phi_T = T2(ω·vm + (1-ω)·trans)
//! phi_M = M2(conv3(conv1(concat(vm, phi_T))))
//! ```
//!
//! `phi_M` consumes `phi_T`, so the second transformer layer always runs
//! before the second state-space layer.

use super::attention::{transformer_block, TransformerBlockParams};
use super::feature::{same_dims, FeatureMap, Provenance};
use super::layers::{ChannelNorm, Conv, Ctx};
use super::ssm::{vmamba_block, VmambaBlockParams};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId};

/// What occupies the second branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MambaKind {
    /// Selective-scan (cross-scan) block.
    Ssm,
    /// Residual convolution block in its place.
    Conv,
}

/// Ablation switches for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchLayout {
    pub transformer: bool,
    pub mamba: Option<MambaKind>,
    pub interaction: bool,
}

impl Default for BranchLayout {
    fn default() -> Self {
        Self {
            transformer: true,
            mamba: Some(MambaKind::Ssm),
            interaction: true,
        }
    }
}

impl BranchLayout {
    pub fn validate(&self) -> Result<()> {
        if !self.transformer && self.mamba.is_none() {
            return Err(Error::Config("cannot disable both branches".into()));
        }
        Ok(())
    }

    /// Interaction only exists when both branches do.
    pub fn interacts(&self) -> bool {
        self.interaction && self.transformer && self.mamba.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct ShallowExtractor {
    pub channels: usize,
    pub embed: Conv,
    pub block: TransformerBlockParams,
}

impl ShallowExtractor {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            embed: Conv::new(&mut init.sub("embed"), 1, channels, 1, 1, true)?,
            block: TransformerBlockParams::new(&mut init.sub("block"), channels)?,
        })
    }
}

/// Lifts a single-channel `1×H×W` image to `C×H×W` shallow features.
pub fn shallow_extract(cx: &Ctx, img: Var, p: &ShallowExtractor) -> Result<FeatureMap> {
    let s = cx.g.shape(img);
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::contract(format!(
            "shallow_extract expects a 1×H×W image, got {s:?}"
        )));
    }
    let e = FeatureMap::new(cx.g, p.embed.forward(cx, img)?, Provenance::Shallow)?;
    Ok(transformer_block(cx, &e, &p.block)?.with(Provenance::Shallow))
}

#[derive(Clone, Debug)]
pub struct InteractionParams {
    /// ω = sigmoid(omega_raw)
    pub omega_raw: ParamId,
    pub mix1: Conv,
    pub mix3: Conv,
}

impl InteractionParams {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            omega_raw: init.full("omega_raw", &[1], 0.0)?,
            mix1: Conv::new(&mut init.sub("mix1"), 2 * channels, channels, 1, 1, true)?,
            mix3: Conv::new(&mut init.sub("mix3"), channels, channels, 3, 1, true)?,
        })
    }
}

pub fn omega(cx: &Ctx, ip: &InteractionParams) -> Result<Var> {
    cx.g.sigmoid(cx.p(ip.omega_raw))
}

/// `ω·phi_vm + (1-ω)·phi_trans`, the input of the second transformer layer.
pub fn tm_positional_inject(
    cx: &Ctx,
    phi_vm: &FeatureMap,
    phi_trans: &FeatureMap,
    ip: &InteractionParams,
) -> Result<FeatureMap> {
    let g = cx.g;
    phi_vm.expect(&[Provenance::Mamba], "tm_positional_inject")?;
    phi_trans.expect(&[Provenance::Transformer], "tm_positional_inject")?;
    same_dims(g, "tm_positional_inject", phi_vm, phi_trans)?;
    let w = omega(cx, ip)?;
    let one_minus = g.affine(w, -1.0, 1.0)?;
    let a = g.scale_by(phi_vm.var, w)?;
    let b = g.scale_by(phi_trans.var, one_minus)?;
    FeatureMap::new(g, g.add(a, b)?, Provenance::Transformer)
}

/// Concatenate, mix with 1×1 (2C→C), aggregate with 3×3: the input of the
/// second state-space layer.
pub fn tm_channel_inject(
    cx: &Ctx,
    phi_vm: &FeatureMap,
    phi_t: &FeatureMap,
    ip: &InteractionParams,
) -> Result<FeatureMap> {
    let g = cx.g;
    same_dims(g, "tm_channel_inject", phi_vm, phi_t)?;
    let cat = g.concat(&[phi_vm.var, phi_t.var], 0)?;
    let mixed = ip.mix1.forward(cx, cat)?;
    let agg = ip.mix3.forward(cx, mixed)?;
    FeatureMap::new(g, agg, Provenance::Mamba)
}

/// `x + conv3(SiLU(conv3(LN(x))))`, used in place of the state-space block
/// for the convolutional ablation.
#[derive(Clone, Debug)]
pub struct ResidualConvParams {
    pub norm: ChannelNorm,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualConvParams {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: ChannelNorm::new(&mut init.sub("norm"), channels)?,
            conv1: Conv::new(&mut init.sub("conv1"), channels, channels, 3, 1, true)?,
            conv2: Conv::new(&mut init.sub("conv2"), channels, channels, 3, 1, true)?,
        })
    }
}

#[derive(Clone, Debug)]
pub enum MambaLayer {
    Ssm(VmambaBlockParams),
    Conv(ResidualConvParams),
}

impl MambaLayer {
    fn new(init: &mut Init, kind: MambaKind, channels: usize, arch: &BlockArch) -> Result<Self> {
        Ok(match kind {
            MambaKind::Ssm => {
                MambaLayer::Ssm(VmambaBlockParams::new(init, channels, arch.expansion, arch.state_dim)?)
            }
            MambaKind::Conv => MambaLayer::Conv(ResidualConvParams::new(init, channels)?),
        })
    }

    pub fn forward(&self, cx: &Ctx, x: &FeatureMap) -> Result<FeatureMap> {
        match self {
            MambaLayer::Ssm(p) => vmamba_block(cx, x, p),
            MambaLayer::Conv(p) => {
                let g = cx.g;
                let h = p.conv1.forward(cx, p.norm.forward(cx, x.var)?)?;
                let h = p.conv2.forward(cx, g.silu(h)?)?;
                FeatureMap::new(g, g.add(x.var, h)?, Provenance::Mamba)
            }
        }
    }
}

/// Size hyperparameters shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockArch {
    pub channels: usize,
    pub state_dim: usize,
    pub expansion: usize,
}

#[derive(Clone, Debug)]
pub struct TmambaBlockParams {
    pub channels: usize,
    pub layout: BranchLayout,
    pub t1: Option<TransformerBlockParams>,
    pub t2: Option<TransformerBlockParams>,
    pub m1: Option<MambaLayer>,
    pub m2: Option<MambaLayer>,
    pub interaction: Option<InteractionParams>,
}

impl TmambaBlockParams {
    pub fn new(init: &mut Init, arch: &BlockArch, layout: BranchLayout) -> Result<Self> {
        layout.validate()?;
        let c = arch.channels;
        let (t1, t2) = if layout.transformer {
            (
                Some(TransformerBlockParams::new(&mut init.sub("t1"), c)?),
                Some(TransformerBlockParams::new(&mut init.sub("t2"), c)?),
            )
        } else {
            (None, None)
        };
        let (m1, m2) = match layout.mamba {
            Some(kind) => (
                Some(MambaLayer::new(&mut init.sub("m1"), kind, c, arch)?),
                Some(MambaLayer::new(&mut init.sub("m2"), kind, c, arch)?),
            ),
            None => (None, None),
        };
        let interaction = if layout.interacts() {
            Some(InteractionParams::new(&mut init.sub("interaction"), c)?)
        } else {
            None
        };
        Ok(Self {
            channels: c,
            layout,
            t1,
            t2,
            m1,
            m2,
            interaction,
        })
    }
}

/// Which outputs the caller will read; unread tails are not evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Want {
    pub transformer: bool,
    pub mamba: bool,
}

impl Want {
    pub const BOTH: Want = Want {
        transformer: true,
        mamba: true,
    };
    pub const TRANSFORMER: Want = Want {
        transformer: true,
        mamba: false,
    };
    pub const MAMBA: Want = Want {
        transformer: false,
        mamba: true,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct TmambaOutputs {
    pub transformer: Option<FeatureMap>,
    pub mamba: Option<FeatureMap>,
}

impl TmambaBlockParams {
    /// Runs the block with separate branch inputs (equal for the first
    /// encoder block and for fusion blocks).
    pub fn forward_pair(
        &self,
        cx: &Ctx,
        t_in: &FeatureMap,
        m_in: &FeatureMap,
        want: Want,
    ) -> Result<TmambaOutputs> {
        let mut out = TmambaOutputs {
            transformer: None,
            mamba: None,
        };
        let trans1 = match &self.t1 {
            Some(t1) => Some(transformer_block(cx, t_in, t1)?),
            None => None,
        };
        let vm1 = match &self.m1 {
            Some(m1) => Some(m1.forward(cx, m_in)?),
            None => None,
        };
        match (&self.interaction, trans1, vm1) {
            (Some(ip), Some(trans1), Some(vm1)) => {
                let t2 = self.t2.as_ref().expect("interaction implies transformer");
                let m2 = self.m2.as_ref().expect("interaction implies mamba");
                let mixed = tm_positional_inject(cx, &vm1, &trans1, ip)?;
                let phi_t = transformer_block(cx, &mixed, t2)?;
                if want.mamba {
                    let m_input = tm_channel_inject(cx, &vm1, &phi_t, ip)?;
                    out.mamba = Some(m2.forward(cx, &m_input)?);
                }
                if want.transformer {
                    out.transformer = Some(phi_t);
                }
            }
            (_, trans1, vm1) => {
                if let (true, Some(x), Some(t2)) = (want.transformer, trans1, &self.t2) {
                    out.transformer = Some(transformer_block(cx, &x, t2)?);
                }
                if let (true, Some(x), Some(m2)) = (want.mamba, vm1, &self.m2) {
                    out.mamba = Some(m2.forward(cx, &x)?);
                }
            }
        }
        Ok(out)
    }
}

/// Single-input entry point: `phi_S` feeds both branches.
pub fn tmamba_block(cx: &Ctx, phi_s: &FeatureMap, p: &TmambaBlockParams) -> Result<TmambaOutputs> {
    phi_s.expect(&[Provenance::Shallow], "tmamba_block")?;
    p.forward_pair(cx, phi_s, phi_s, Want::BOTH)
}
