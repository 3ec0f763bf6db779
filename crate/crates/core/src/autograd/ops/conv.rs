//! 2-D cross-correlation (no kernel flip) with zero padding.

use super::{wants_grad, Op};
use crate::autograd::graph::{accumulate, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

/// Plane-level geometry for one kernel tap.
#[derive(Clone, Copy)]
struct Plane {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Plane {
    /// Output index range `[lo, hi)` along one axis for which
    /// `o * stride + off` lands inside `0..n_in`.
    fn range(off: isize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = n_in as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(n_out as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Calls `f(out_index, in_index)` for every valid pair of this tap.
    #[inline]
    fn for_tap(&self, oy_off: isize, ox_off: isize, mut f: impl FnMut(usize, usize)) {
        let (y0, y1) = Self::range(oy_off, self.stride, self.h, self.ho);
        let (x0, x1) = Self::range(ox_off, self.stride, self.w, self.wo);
        for oy in y0..y1 {
            let iy = (oy * self.stride) as isize + oy_off;
            let irow = iy as usize * self.w;
            let orow = oy * self.wo;
            for ox in x0..x1 {
                let ix = ((ox * self.stride) as isize + ox_off) as usize;
                f(orow + ox, irow + ix);
            }
        }
    }
}

fn out_dim(n: usize, k: usize, g: ConvGeom) -> Option<usize> {
    let span = g.dilation * (k - 1) + 1;
    let padded = n + 2 * g.pad;
    (padded >= span).then(|| (padded - span) / g.stride + 1)
}

fn tap_offset(ky: usize, g: ConvGeom) -> isize {
    (ky * g.dilation) as isize - g.pad as isize
}

impl Graph {
    /// `x: [C_in, H, W]`, `w: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (out, flops) = {
            let (tx, tw) = (self.value(x), self.value(w));
            if tx.ndim() != 3 || tw.ndim() != 4 || tw.shape()[1] != tx.shape()[0] {
                return Err(Error::dim(
                    "conv2d",
                    format!("input {:?} vs kernel {:?}", tx.shape(), tw.shape()),
                ));
            }
            if geom.stride == 0 || geom.dilation == 0 {
                return Err(Error::contract("conv2d stride and dilation must be >= 1"));
            }
            let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
            let (Some(ho), Some(wo)) = (out_dim(h, kh, geom), out_dim(wd, kw, geom)) else {
                return Err(Error::dim("conv2d", "kernel larger than padded input"));
            };
            let p = Plane {
                h,
                w: wd,
                ho,
                wo,
                stride: geom.stride,
            };
            let (xd, wdat) = (tx.data(), tw.data());
            let plane = ho * wo;
            let work = co * ci * kh * kw * plane;
            let mut data = vec![0.0; co * plane];
            exec::chunks_mut(&mut data, plane, work, |o, oplane| {
                for c in 0..ci {
                    let inp = &xd[c * h * wd..(c + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((o * ci + c) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            p.for_tap(tap_offset(ky, geom), tap_offset(kx, geom), |oi, ii| {
                                oplane[oi] += wv * inp[ii];
                            });
                        }
                    }
                }
            });
            (Tensor::new(&[co, ho, wo], data)?, work)
        };
        self.add_flops(flops);
        self.push("conv2d", out, Op::Conv2d { x, w, geom })
    }

    /// Per-channel convolution, `x: [C, H, W]`, `w: [C, 1, kh, kw]`, stride 1.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, pad: usize, dilation: usize) -> Result<Var> {
        let geom = ConvGeom {
            stride: 1,
            pad,
            dilation,
        };
        let (out, flops) = {
            let (tx, tw) = (self.value(x), self.value(w));
            if tx.ndim() != 3
                || tw.ndim() != 4
                || tw.shape()[0] != tx.shape()[0]
                || tw.shape()[1] != 1
            {
                return Err(Error::dim(
                    "depthwise_conv2d",
                    format!("input {:?} vs kernel {:?}", tx.shape(), tw.shape()),
                ));
            }
            let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            let (kh, kw) = (tw.shape()[2], tw.shape()[3]);
            let (Some(ho), Some(wo)) = (out_dim(h, kh, geom), out_dim(wd, kw, geom)) else {
                return Err(Error::dim("depthwise_conv2d", "kernel larger than padded input"));
            };
            let p = Plane {
                h,
                w: wd,
                ho,
                wo,
                stride: 1,
            };
            let (xd, wdat) = (tx.data(), tw.data());
            let plane = ho * wo;
            let work = c * kh * kw * plane;
            let mut data = vec![0.0; c * plane];
            exec::chunks_mut(&mut data, plane, work, |ch, oplane| {
                let inp = &xd[ch * h * wd..(ch + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[(ch * kh + ky) * kw + kx];
                        p.for_tap(tap_offset(ky, geom), tap_offset(kx, geom), |oi, ii| {
                            oplane[oi] += wv * inp[ii];
                        });
                    }
                }
            });
            (Tensor::new(&[c, ho, wo], data)?, work)
        };
        self.add_flops(flops);
        self.push("depthwise_conv2d", out, Op::DepthwiseConv2d { x, w, geom })
    }
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let (x, w, geom, depthwise) = match &node.op {
        Op::Conv2d { x, w, geom } => (*x, *w, *geom, false),
        Op::DepthwiseConv2d { x, w, geom } => (*x, *w, *geom, true),
        _ => unreachable!("not a conv op"),
    };
    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
    let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
    let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
    let p = Plane {
        h,
        w: wd,
        ho,
        wo,
        stride: geom.stride,
    };
    let (xd, wdat) = (tx.data(), tw.data());
    let (iplane, oplane) = (h * wd, ho * wo);
    let taps = kh * kw;

    if wants_grad(nodes, x) {
        let mut gx = vec![0.0; ci * iplane];
        let work = co * ci * taps * oplane;
        exec::chunks_mut(&mut gx, iplane, work, |c, gin| {
            let outs: Box<dyn Iterator<Item = usize>> = if depthwise {
                Box::new(std::iter::once(c))
            } else {
                Box::new(0..co)
            };
            for o in outs {
                let gout = &gy[o * oplane..(o + 1) * oplane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = if depthwise {
                            wdat[(c * kh + ky) * kw + kx]
                        } else {
                            wdat[((o * ci + c) * kh + ky) * kw + kx]
                        };
                        if wv == 0.0 {
                            continue;
                        }
                        p.for_tap(tap_offset(ky, geom), tap_offset(kx, geom), |oi, ii| {
                            gin[ii] += wv * gout[oi];
                        });
                    }
                }
            }
        });
        accumulate(grads, x.0, &gx);
    }

    if wants_grad(nodes, w) {
        let per_out = if depthwise { taps } else { ci * taps };
        let mut gw = vec![0.0; co * per_out];
        let work = co * ci * taps * oplane;
        exec::chunks_mut(&mut gw, per_out, work, |o, gwo| {
            let gout = &gy[o * oplane..(o + 1) * oplane];
            let chans: Box<dyn Iterator<Item = (usize, usize)>> = if depthwise {
                Box::new(std::iter::once((0, o)))
            } else {
                Box::new((0..ci).map(|c| (c, c)))
            };
            for (slot_c, c) in chans {
                let inp = &xd[c * iplane..(c + 1) * iplane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        p.for_tap(tap_offset(ky, geom), tap_offset(kx, geom), |oi, ii| {
                            acc += gout[oi] * inp[ii];
                        });
                        gwo[(slot_c * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        });
        accumulate(grads, w.0, &gw);
    }
}
