use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Where a feature map sits in the encoder → fusion → decoder pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Shallow,
    Transformer,
    Mamba,
    Prefused,
    Fused,
}

/// A `C×H×W` activation tagged with its pipeline stage.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub provenance: Provenance,
}

impl FeatureMap {
    pub fn new(g: &Graph, var: Var, provenance: Provenance) -> Result<Self> {
        let s = g.shape(var);
        if s.len() != 3 {
            return Err(Error::dim("feature_map", format!("{s:?} is not C×H×W")));
        }
        Ok(Self { var, provenance })
    }

    pub fn dims(&self, g: &Graph) -> (usize, usize, usize) {
        let s = g.shape(self.var);
        (s[0], s[1], s[2])
    }

    pub fn with(self, provenance: Provenance) -> Self {
        Self {
            var: self.var,
            provenance,
        }
    }

    pub(crate) fn expect(&self, allowed: &[Provenance], op: &str) -> Result<()> {
        if allowed.contains(&self.provenance) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{op} expects provenance {allowed:?}, got {:?}",
                self.provenance
            )))
        }
    }
}

pub(crate) fn same_dims(g: &Graph, op: &'static str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    let (sa, sb) = (g.shape(a.var), g.shape(b.var));
    if sa != sb {
        return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}
