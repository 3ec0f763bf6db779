//! The complete network: shallow extractor, encoder, fusion head, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::feature::FeatureMap;
use super::fusion::{
    attention_weighting, decode, modality_attentions, prefuse_mamba, prefuse_separate,
    prefuse_transformer, tmamba_fuse, DecoderParams, FusionParams,
};
use super::layers::Ctx;
use super::ssm::{DEFAULT_EXPANSION, DEFAULT_STATE_DIM};
use super::tmamba::{shallow_extract, BlockArch, BranchLayout, ShallowExtractor, TmambaBlockParams, Want};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub layout: BranchLayout,
    pub cross_modal_attention: bool,
}

impl ModelConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            depth: 1,
            state_dim: DEFAULT_STATE_DIM,
            expansion: DEFAULT_EXPANSION,
            layout: BranchLayout::default(),
            cross_modal_attention: true,
        }
    }

    pub fn arch(&self) -> BlockArch {
        BlockArch {
            channels: self.channels,
            state_dim: self.state_dim,
            expansion: self.expansion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 || self.state_dim == 0 || self.expansion == 0 {
            return Err(Error::Config(
                "channels, depth, state_dim and expansion must be positive".into(),
            ));
        }
        self.layout.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TmambaModel {
    pub config: ModelConfig,
    pub shallow: ShallowExtractor,
    pub encoder: Vec<TmambaBlockParams>,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

/// Branch outputs of the encoder for one image.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub shallow: FeatureMap,
    pub transformer: Option<FeatureMap>,
    pub mamba: Option<FeatureMap>,
}

/// Intermediate values of a fusion forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub fused: Var,
    pub weights: Option<(Var, Var)>,
    pub ir: Encoded,
    pub vis: Encoded,
}

impl TmambaModel {
    /// Builds the model and registers every parameter in `store`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let arch = config.arch();
        let shallow = ShallowExtractor::new(&mut init.sub("shallow"), config.channels)?;
        let mut encoder = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            encoder.push(TmambaBlockParams::new(
                &mut init.sub(&format!("encoder.{i}")),
                &arch,
                config.layout,
            )?);
        }
        let fusion = FusionParams::new(&mut init.sub("fusion"), &arch, config.layout)?;
        let inputs = usize::from(config.layout.transformer) + usize::from(config.layout.mamba.is_some());
        let decoder = DecoderParams::new(&mut init.sub("decoder"), config.channels, inputs)?;
        Ok(Self {
            config,
            shallow,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn encode(&self, cx: &Ctx, img: Var) -> Result<Encoded> {
        let shallow = shallow_extract(cx, img, &self.shallow)?;
        let (mut t, mut m) = (shallow, shallow);
        let mut out = (None, None);
        for blk in &self.encoder {
            let o = blk.forward_pair(cx, &t, &m, Want::BOTH)?;
            out = (o.transformer, o.mamba);
            t = o.transformer.unwrap_or(shallow);
            m = o.mamba.unwrap_or(shallow);
        }
        Ok(Encoded {
            shallow,
            transformer: out.0,
            mamba: out.1,
        })
    }

    /// Stage-I path: encoder then decoder with fusion bypassed.
    pub fn reconstruct(&self, cx: &Ctx, img: Var) -> Result<Var> {
        let e = self.encode(cx, img)?;
        decode(cx, e.transformer.as_ref(), e.mamba.as_ref(), &self.decoder)
    }

    /// Stage-II path. `forced` pins the attention weights (testing only).
    pub fn fuse(&self, cx: &Ctx, ir: Var, vis: Var, forced: Option<(f64, f64)>) -> Result<FusionTrace> {
        let g = cx.g;
        if g.shape(ir) != g.shape(vis) {
            return Err(Error::dim(
                "fuse",
                format!("{:?} vs {:?}", g.shape(ir), g.shape(vis)),
            ));
        }
        let ei = self.encode(cx, ir)?;
        let ev = self.encode(cx, vis)?;
        let mut weights = None;
        let p_t = match (&self.fusion.cross, ei.transformer, ev.transformer) {
            (Some(cross), Some(ti), Some(tv)) => {
                let (_, h, w) = ti.dims(g);
                let m = modality_attentions(cx, &tv, &ti, cross)?;
                if self.config.cross_modal_attention {
                    let (a, w1, w2) =
                        attention_weighting(cx, &tv, &ti, m.a_v, m.a_i, &cross.weights, forced)?;
                    weights = Some((w1, w2));
                    Some(prefuse_transformer(cx, a, m.v_i, m.v_v, h, w)?)
                } else {
                    Some(prefuse_separate(cx, &m, h, w)?)
                }
            }
            _ => None,
        };
        let p_m = match (ei.mamba, ev.mamba) {
            (Some(mi), Some(mv)) => Some(prefuse_mamba(cx, &mi, &mv)?),
            _ => None,
        };
        let (ft, fm) = tmamba_fuse(cx, p_t.as_ref(), p_m.as_ref(), &self.fusion)?;
        let fused = decode(cx, ft.as_ref(), fm.as_ref(), &self.decoder)?;
        Ok(FusionTrace {
            fused,
            weights,
            ir: ei,
            vis: ev,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn image(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin())
    }

    #[test]
    fn reconstruct_and_fuse_shapes() {
        let mut ps = ParamStore::new();
        let m = TmambaModel::new(ModelConfig::new(4), &mut ps, 3).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let x = g.constant(image(6, 5, 0.0));
        let y = g.constant(image(6, 5, 1.0));
        let r = m.reconstruct(&cx, x).unwrap();
        assert_eq!(g.shape(r), vec![1, 6, 5]);
        let t = m.fuse(&cx, x, y, None).unwrap();
        assert_eq!(g.shape(t.fused), vec![1, 6, 5]);
        let (w1, w2) = t.weights.unwrap();
        assert!((g.item(w1) + g.item(w2) - 1.0).abs() < 1e-12);
        assert!(g.value(t.fused).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_ablation_builds_and_runs() {
        use crate::nn::tmamba::MambaKind;
        let layouts = [
            (true, None, false),
            (false, Some(MambaKind::Ssm), false),
            (true, Some(MambaKind::Ssm), false),
            (true, Some(MambaKind::Conv), true),
        ];
        for (cross, (transformer, mamba, interaction)) in layouts
            .into_iter()
            .flat_map(|l| [(false, l), (true, l)])
        {
            let mut cfg = ModelConfig::new(4);
            cfg.layout = BranchLayout { transformer, mamba, interaction };
            cfg.cross_modal_attention = cross;
            cfg.depth = 2;
            let mut ps = ParamStore::new();
            let m = TmambaModel::new(cfg, &mut ps, 1).unwrap();
            let g = Graph::new();
            let cx = Ctx::new(&g, &ps);
            let x = g.constant(image(5, 5, 0.0));
            let y = g.constant(image(5, 5, 2.0));
            let t = m.fuse(&cx, x, y, None).unwrap();
            let loss = g.mean(t.fused).unwrap();
            g.backward(loss).unwrap();
        }
        let mut cfg = ModelConfig::new(4);
        cfg.layout.transformer = false;
        cfg.layout.mamba = None;
        assert!(TmambaModel::new(cfg, &mut ParamStore::new(), 0).is_err());
    }

    #[test]
    fn mismatched_modalities_rejected() {
        let mut ps = ParamStore::new();
        let m = TmambaModel::new(ModelConfig::new(4), &mut ps, 3).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let x = g.constant(image(6, 5, 0.0));
        let y = g.constant(image(5, 6, 0.0));
        assert!(matches!(m.fuse(&cx, x, y, None), Err(Error::Dimension { .. })));
    }
}
