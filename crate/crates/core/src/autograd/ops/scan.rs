//! Fused selective state-space recurrence.
//!
//! For every channel `d` and state index `n`:
//!
//! ```text
//! h[t] = exp(Δ[t,d] · A[d,n]) · h[t-1] + Δ[t,d] · B[t,n] · x[t,d]     h[-1] = 0
//! y[t,d] = Σ_n C[t,n] · h[t,n] + D[d] · x[t,d]
//! ```
//!
//! Channels are independent, so forward and backward both split over `d`.
//! Hidden states are kept for the backward sweep.

use super::{wants_grad, Op};
use crate::autograd::graph::{accumulate, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub(crate) struct ScanSaved {
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    /// `[D][L][N]`
    states: Vec<f64>,
}

impl ScanSaved {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.delta, self.a, self.b, self.c, self.d]
    }
}

/// Operands of [`Graph::ssm_scan`].
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `[L, D]`
    pub x: Var,
    /// `[L, D]`, positive step sizes
    pub delta: Var,
    /// `[D, N]`, continuous-time decay rates (negative)
    pub a: Var,
    /// `[L, N]`
    pub b: Var,
    /// `[L, N]`
    pub c: Var,
    /// `[D]`, skip gain
    pub d: Var,
}

impl Graph {
    pub fn ssm_scan(&self, inp: ScanInputs) -> Result<Var> {
        let (out, states, flops) = {
            let x = self.value(inp.x);
            let dt = self.value(inp.delta);
            let a = self.value(inp.a);
            let b = self.value(inp.b);
            let c = self.value(inp.c);
            let dk = self.value(inp.d);
            if x.ndim() != 2 {
                return Err(Error::dim("ssm_scan", format!("x {:?} is not [L, D]", x.shape())));
            }
            let (l, dch) = (x.shape()[0], x.shape()[1]);
            if a.ndim() != 2 || a.shape()[0] != dch {
                return Err(Error::dim("ssm_scan", format!("A {:?} vs D={dch}", a.shape())));
            }
            let n = a.shape()[1];
            let ok = dt.shape() == x.shape()
                && b.shape() == [l, n]
                && c.shape() == [l, n]
                && dk.shape() == [dch];
            if !ok {
                return Err(Error::dim(
                    "ssm_scan",
                    format!(
                        "x {:?} Δ {:?} A {:?} B {:?} C {:?} D {:?}",
                        x.shape(),
                        dt.shape(),
                        a.shape(),
                        b.shape(),
                        c.shape(),
                        dk.shape()
                    ),
                ));
            }
            let (xd, dtd, ad, bd, cd, dd) =
                (x.data(), dt.data(), a.data(), b.data(), c.data(), dk.data());
            let work = l * dch * n * 4;
            let per_channel = exec::map_indexed(dch, work, |ch| {
                let mut h = vec![0.0; n];
                let mut ys = Vec::with_capacity(l);
                let mut hs = Vec::with_capacity(l * n);
                for t in 0..l {
                    let xt = xd[t * dch + ch];
                    let dtt = dtd[t * dch + ch];
                    let mut y = dd[ch] * xt;
                    for k in 0..n {
                        let decay = (dtt * ad[ch * n + k]).exp();
                        h[k] = decay * h[k] + dtt * bd[t * n + k] * xt;
                        y += cd[t * n + k] * h[k];
                    }
                    hs.extend_from_slice(&h);
                    ys.push(y);
                }
                (ys, hs)
            });
            let mut y = vec![0.0; l * dch];
            let mut states = Vec::with_capacity(dch * l * n);
            for (ch, (ys, hs)) in per_channel.into_iter().enumerate() {
                for (t, v) in ys.into_iter().enumerate() {
                    y[t * dch + ch] = v;
                }
                states.extend(hs);
            }
            (Tensor::new(&[l, dch], y)?, states, work)
        };
        self.add_flops(flops);
        let saved = ScanSaved {
            x: inp.x,
            delta: inp.delta,
            a: inp.a,
            b: inp.b,
            c: inp.c,
            d: inp.d,
            states,
        };
        self.push("ssm_scan", out, Op::Scan(Box::new(saved)))
    }
}

struct ChannelGrads {
    gx: Vec<f64>,
    gdelta: Vec<f64>,
    ga: Vec<f64>,
    gb: Vec<f64>,
    gc: Vec<f64>,
    gd: f64,
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let Op::Scan(s) = &nodes[id].op else {
        unreachable!()
    };
    let val = |v: Var| nodes[v.0].value.data();
    let (xd, dtd, ad, bd, cd, dd) = (val(s.x), val(s.delta), val(s.a), val(s.b), val(s.c), val(s.d));
    let shape = nodes[s.x.0].value.shape();
    let (l, dch) = (shape[0], shape[1]);
    let n = nodes[s.a.0].value.shape()[1];
    let states = &s.states;

    let per_channel = exec::map_indexed(dch, l * dch * n * 8, |ch| {
        let hs = &states[ch * l * n..(ch + 1) * l * n];
        let mut g = ChannelGrads {
            gx: vec![0.0; l],
            gdelta: vec![0.0; l],
            ga: vec![0.0; n],
            gb: vec![0.0; l * n],
            gc: vec![0.0; l * n],
            gd: 0.0,
        };
        // carry[k] = dL/dh[t] flowing back from step t+1
        let mut carry = vec![0.0; n];
        for t in (0..l).rev() {
            let gyt = gy[t * dch + ch];
            let xt = xd[t * dch + ch];
            let dtt = dtd[t * dch + ch];
            g.gd += gyt * xt;
            g.gx[t] += gyt * dd[ch];
            for k in 0..n {
                let a = ad[ch * n + k];
                let decay = (dtt * a).exp();
                let h = hs[t * n + k];
                let h_prev = if t > 0 { hs[(t - 1) * n + k] } else { 0.0 };
                g.gc[t * n + k] += gyt * h;
                let gh = gyt * cd[t * n + k] + carry[k];
                let g_decay = gh * h_prev * decay;
                let bt = bd[t * n + k];
                g.gdelta[t] += g_decay * a + gh * bt * xt;
                g.ga[k] += g_decay * dtt;
                g.gb[t * n + k] += gh * dtt * xt;
                g.gx[t] += gh * dtt * bt;
                carry[k] = gh * decay;
            }
        }
        g
    });

    let spread = |col: &dyn Fn(&ChannelGrads) -> &Vec<f64>| {
        let mut out = vec![0.0; l * dch];
        for (ch, g) in per_channel.iter().enumerate() {
            for (t, v) in col(g).iter().enumerate() {
                out[t * dch + ch] = *v;
            }
        }
        out
    };
    if wants_grad(nodes, s.x) {
        accumulate(grads, s.x.0, &spread(&|g| &g.gx));
    }
    if wants_grad(nodes, s.delta) {
        accumulate(grads, s.delta.0, &spread(&|g| &g.gdelta));
    }
    if wants_grad(nodes, s.a) {
        let ga: Vec<f64> = per_channel.iter().flat_map(|g| g.ga.iter().copied()).collect();
        accumulate(grads, s.a.0, &ga);
    }
    for (v, pick) in [
        (s.b, (|g: &ChannelGrads| &g.gb) as fn(&ChannelGrads) -> &Vec<f64>),
        (s.c, |g: &ChannelGrads| &g.gc),
    ] {
        if wants_grad(nodes, v) {
            let mut acc = vec![0.0; l * n];
            for g in &per_channel {
                for (a, b) in acc.iter_mut().zip(pick(g)) {
                    *a += b;
                }
            }
            accumulate(grads, v.0, &acc);
        }
    }
    if wants_grad(nodes, s.d) {
        let gd: Vec<f64> = per_channel.iter().map(|g| g.gd).collect();
        accumulate(grads, s.d.0, &gd);
    }
}
