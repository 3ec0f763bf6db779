//! Selective state-space branch.
//!
//! Tokens drive their own step size Δ and input/output projections B, C
//! (input selectivity). The continuous decay `A = -exp(A_log)` is strictly
//! negative, so the hidden state always attenuates between tokens; that
//! ordering dependence is what gives the branch its positional signal.
//! A 2-D map is covered by four raster traversals whose outputs are summed.

use super::attention::tokens_to_map;
use super::feature::{FeatureMap, Provenance};
use super::layers::{ChannelNorm, Conv, Ctx, DwConv};
use crate::autograd::{ScanInputs, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_DIM: usize = 8;
pub const DEFAULT_EXPANSION: usize = 2;
/// Initial step size after softplus.
pub const DELTA_INIT: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub d_inner: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    /// `[D, R + 2N]`: token → (Δ low-rank input, B, C)
    pub x_proj: ParamId,
    /// `[R, D]`
    pub dt_weight: ParamId,
    /// `[D]`
    pub dt_bias: ParamId,
    /// `[D, N]`, `A = -exp(A_log)`
    pub a_log: ParamId,
    /// `[D]`
    pub d_skip: ParamId,
}

impl SsmParams {
    pub fn new(init: &mut Init, d_inner: usize, state_dim: usize) -> Result<Self> {
        let dt_rank = d_inner.div_ceil(16).max(1);
        let a_log = Tensor::from_fn(&[d_inner, state_dim], |i| ((i % state_dim) as f64 + 1.0).ln());
        // softplus(b) = DELTA_INIT
        let dt_bias = DELTA_INIT.exp_m1().ln();
        Ok(Self {
            d_inner,
            state_dim,
            dt_rank,
            x_proj: init.fan_in("x_proj", &[d_inner, dt_rank + 2 * state_dim], d_inner)?,
            dt_weight: init.uniform("dt_weight", &[dt_rank, d_inner], 0.1 / (dt_rank as f64).sqrt())?,
            dt_bias: init.full("dt_bias", &[d_inner], dt_bias)?,
            a_log: init.tensor("a_log", a_log)?,
            d_skip: init.full("d_skip", &[d_inner], 1.0)?,
        })
    }
}

/// Projected per-token quantities of one scan, exposed for tests and probes.
#[derive(Clone, Copy, Debug)]
pub struct ScanProjections {
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

pub fn scan_projections(cx: &Ctx, x: Var, p: &SsmParams) -> Result<ScanProjections> {
    let g = cx.g;
    let s = g.shape(x);
    if s.len() != 2 || s[1] != p.d_inner {
        return Err(Error::dim(
            "selective_scan",
            format!("input {s:?}, params built for D={}", p.d_inner),
        ));
    }
    let (r, n) = (p.dt_rank, p.state_dim);
    let proj = g.matmul(x, cx.p(p.x_proj))?;
    let dt_in = g.slice(proj, 1, 0, r)?;
    let b = g.slice(proj, 1, r, n)?;
    let c = g.slice(proj, 1, r + n, n)?;
    let dt = g.matmul(dt_in, cx.p(p.dt_weight))?;
    let delta = g.softplus(g.bias_add(dt, cx.p(p.dt_bias), 1)?)?;
    let a = g.neg(g.exp(cx.p(p.a_log))?)?;
    Ok(ScanProjections {
        delta,
        a,
        b,
        c,
        d: cx.p(p.d_skip),
    })
}

/// Runs the selective recurrence over `x: [L, D]`.
pub fn selective_scan(cx: &Ctx, x: Var, p: &SsmParams) -> Result<Var> {
    if cx.g.shape(x).first() == Some(&0) {
        return Err(Error::contract("selective_scan needs L >= 1"));
    }
    let pr = scan_projections(cx, x, p)?;
    cx.g.ssm_scan(ScanInputs {
        x,
        delta: pr.delta,
        a: pr.a,
        b: pr.b,
        c: pr.c,
        d: pr.d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReversed,
    ColumnMajor,
    ColumnMajorReversed,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::RowMajorReversed,
        ScanDirection::ColumnMajor,
        ScanDirection::ColumnMajorReversed,
    ];

    /// `order[i]` is the row-major pixel index visited at step `i`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w)
            .flat_map(|x| (0..h).map(move |y| y * w + x))
            .collect();
        match self {
            ScanDirection::RowMajor => row,
            ScanDirection::RowMajorReversed => row.into_iter().rev().collect(),
            ScanDirection::ColumnMajor => col,
            ScanDirection::ColumnMajorReversed => col.into_iter().rev().collect(),
        }
    }
}

pub(crate) fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &p) in order.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Scans the map along all four directions and sums the re-folded outputs
/// in [`ScanDirection::ALL`] order.
pub fn cross_scan_2d(cx: &Ctx, x: &FeatureMap, p: &SsmParams) -> Result<FeatureMap> {
    let g = cx.g;
    let (c, h, w) = x.dims(g);
    let tokens = g.transpose(g.reshape(x.var, &[c, h * w])?)?;
    let mut acc: Option<Var> = None;
    for dir in ScanDirection::ALL {
        let order = dir.order(h, w);
        let seq = g.gather_rows(tokens, &order)?;
        let y = selective_scan(cx, seq, p)?;
        let back = g.gather_rows(y, &inverse(&order))?;
        acc = Some(match acc {
            None => back,
            Some(a) => g.add(a, back)?,
        });
    }
    let out = tokens_to_map(cx, acc.expect("four directions"), h, w)?;
    FeatureMap::new(g, out, x.provenance)
}

#[derive(Clone, Debug)]
pub struct VmambaBlockParams {
    pub channels: usize,
    pub inner: usize,
    pub norm: ChannelNorm,
    pub in_proj: Conv,
    pub dw: DwConv,
    pub ssm: SsmParams,
    pub out_proj: Conv,
}

impl VmambaBlockParams {
    pub fn new(init: &mut Init, channels: usize, expansion: usize, state_dim: usize) -> Result<Self> {
        let inner = channels * expansion;
        Ok(Self {
            channels,
            inner,
            norm: ChannelNorm::new(&mut init.sub("norm"), channels)?,
            in_proj: Conv::new(&mut init.sub("in_proj"), channels, 2 * inner, 1, 1, true)?,
            dw: DwConv::new(&mut init.sub("dw"), inner, true)?,
            ssm: SsmParams::new(&mut init.sub("ssm"), inner, state_dim)?,
            out_proj: Conv::new(&mut init.sub("out_proj"), inner, channels, 1, 1, true)?,
        })
    }

    pub fn residual_outputs(&self) -> Vec<ParamId> {
        let mut v = vec![self.out_proj.weight];
        v.extend(self.out_proj.bias);
        v
    }
}

/// `x + out_proj(cross_scan(SiLU(dw(in_x))) ⊙ SiLU(in_z))` with `in = in_proj(LN(x))`.
pub fn vmamba_block(cx: &Ctx, x: &FeatureMap, p: &VmambaBlockParams) -> Result<FeatureMap> {
    let g = cx.g;
    let (c, _, _) = x.dims(g);
    if c != p.channels {
        return Err(Error::dim(
            "vmamba_block",
            format!("{c} channels, block built for {}", p.channels),
        ));
    }
    let n = p.norm.forward(cx, x.var)?;
    let xz = p.in_proj.forward(cx, n)?;
    let xi = g.slice(xz, 0, 0, p.inner)?;
    let z = g.slice(xz, 0, p.inner, p.inner)?;
    let xi = g.silu(p.dw.forward(cx, xi)?)?;
    let scanned = cross_scan_2d(cx, &FeatureMap::new(g, xi, Provenance::Mamba)?, &p.ssm)?;
    let gated = g.mul(scanned.var, g.silu(z)?)?;
    let out = p.out_proj.forward(cx, gated)?;
    FeatureMap::new(g, g.add(x.var, out)?, Provenance::Mamba)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_are_bijections() {
        for dir in ScanDirection::ALL {
            let mut o = dir.order(3, 5);
            o.sort_unstable();
            assert_eq!(o, (0..15).collect::<Vec<_>>());
        }
        assert_eq!(ScanDirection::ColumnMajor.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(ScanDirection::RowMajorReversed.order(1, 3), vec![2, 1, 0]);
    }

    #[test]
    fn inverse_roundtrip() {
        let o = ScanDirection::ColumnMajorReversed.order(4, 3);
        let inv = inverse(&o);
        for (i, &p) in o.iter().enumerate() {
            assert_eq!(inv[p], i);
        }
    }

    #[test]
    fn delta_bias_initialises_step() {
        let b = DELTA_INIT.exp_m1().ln();
        let sp = b.max(0.0) + (-b.abs()).exp().ln_1p();
        assert!((sp - DELTA_INIT).abs() < 1e-15);
    }
}
