//! Parameterised building blocks shared by both branches.

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

/// Forward-pass context: the tape plus the parameter values to bind.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub ps: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, ps: &'a ParamStore) -> Self {
        Self { g, ps }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.ps, id)
    }
}

/// Dense 2-D convolution with optional bias, "same" padding at stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = init.fan_in("weight", &[c_out, c_in, k, k], fan_in)?;
        let bias = if bias {
            Some(init.full("bias", &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom: ConvGeom {
                stride: 1,
                pad: dilation * (k - 1) / 2,
                dilation,
            },
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let y = cx.g.conv2d(x, cx.p(self.weight), self.geom)?;
        match self.bias {
            Some(b) => cx.g.bias_add(y, cx.p(b), 0),
            None => Ok(y),
        }
    }
}

/// Depthwise 3×3 convolution.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl DwConv {
    pub fn new(init: &mut Init, channels: usize, bias: bool) -> Result<Self> {
        let weight = init.fan_in("weight", &[channels, 1, 3, 3], 9)?;
        let bias = if bias {
            Some(init.full("bias", &[channels], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let y = cx.g.depthwise_conv2d(x, cx.p(self.weight), 1, 1)?;
        match self.bias {
            Some(b) => cx.g.bias_add(y, cx.p(b), 0),
            None => Ok(y),
        }
    }
}

/// Layer norm over the channel axis of a `C×H×W` map, per pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.full("gamma", &[channels], 1.0)?,
            beta: init.full("beta", &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let n = cx.g.layer_norm(x, 0, NORM_EPS)?;
        let n = cx.g.scale_along(n, cx.p(self.gamma), 0)?;
        cx.g.bias_add(n, cx.p(self.beta), 0)
    }
}

/// Fully connected layer on a row vector `[1, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.fan_in("weight", &[d_in, d_out], d_in)?,
            bias: init.full("bias", &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.p(self.weight))?;
        cx.g.bias_add(y, cx.p(self.bias), 1)
    }
}
