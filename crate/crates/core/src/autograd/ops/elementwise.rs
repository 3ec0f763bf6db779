use std::f64::consts::PI;

use super::{wants_grad, Op};
use crate::autograd::graph::{accumulate, slot, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Below this an `abs` input counts as an exact cancellation, not a point
/// near the kink.
const ROUNDOFF_FLOOR: f64 = 1e-9;

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Sigmoid,
    Silu,
    /// tanh approximation
    Gelu,
    Softplus,
    Abs,
    Square,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + gelu_inner(x).tanh()),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                let t = gelu_inner(x).tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    debug_assert!((GELU_C - (2.0 / PI).sqrt()).abs() < 1e-15);
    GELU_C * (x + 0.044715 * x * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            same_shape(name, &ta, &tb)?;
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        };
        self.add_flops(out.len());
        self.push(name, out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = {
            let t = self.value(x);
            Tensor::new(t.shape(), t.data().iter().map(|v| scale * v + shift).collect())?
        };
        self.add_flops(out.len());
        self.push("affine", out, Op::Affine { x, scale })
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// `x * s` where `s` is a one-element tensor node.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let (t, ts) = (self.value(x), self.value(s));
            if !ts.is_scalar() {
                return Err(Error::dim("scale_by", format!("scale has shape {:?}", ts.shape())));
            }
            let k = ts.item();
            Tensor::new(t.shape(), t.data().iter().map(|v| v * k).collect())?
        };
        self.add_flops(out.len());
        self.push("scale_by", out, Op::ScaleBy { x, s })
    }

    pub fn unary(&self, x: Var, kind: Unary) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if kind == Unary::Abs {
                // round-off residues come from exact cancellations, such as a
                // Sobel response on a reflected border, and stay at that level
                // under perturbation
                let m = t
                    .data()
                    .iter()
                    .filter(|v| v.abs() > ROUNDOFF_FLOOR)
                    .fold(f64::INFINITY, |m, v| m.min(v.abs()));
                self.note_abs_margin(m);
            }
            Tensor::new(t.shape(), t.data().iter().map(|&v| kind.eval(v)).collect())?
        };
        self.add_flops(out.len());
        self.push(kind.name(), out, Op::Unary { x, kind })
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn recip(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.mul(a, self.recip(b)?)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    /// Adds the 1-D `b` along `axis` of `x` (e.g. a per-channel bias).
    pub fn bias_add(&self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let out = {
            let (t, tb) = (self.value(x), self.value(b));
            check_along("bias_add", &t, &tb, axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            for o in 0..outer {
                for (i, bv) in tb.data().iter().enumerate() {
                    let base = (o * len + i) * inner;
                    for v in &mut data[base..base + inner] {
                        *v += bv;
                    }
                }
            }
            Tensor::new(t.shape(), data)?
        };
        self.add_flops(out.len());
        self.push("bias_add", out, Op::BiasAdd { x, b, axis })
    }

    /// Multiplies `x` by the 1-D `s` along `axis`.
    pub fn scale_along(&self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let out = {
            let (t, ts) = (self.value(x), self.value(s));
            check_along("scale_along", &t, &ts, axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            for o in 0..outer {
                for (i, sv) in ts.data().iter().enumerate() {
                    let base = (o * len + i) * inner;
                    for v in &mut data[base..base + inner] {
                        *v *= sv;
                    }
                }
            }
            Tensor::new(t.shape(), data)?
        };
        self.add_flops(out.len());
        self.push("scale_along", out, Op::ScaleAlong { x, s, axis })
    }
}

fn check_along(op: &'static str, t: &Tensor, v: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() || v.ndim() != 1 || v.len() != t.shape()[axis] {
        return Err(Error::dim(
            op,
            format!("vector {:?} along axis {axis} of {:?}", v.shape(), t.shape()),
        ));
    }
    Ok(())
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants_grad(nodes, v) {
                    accumulate(grads, v.0, gy);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants_grad(nodes, *a) {
                accumulate(grads, a.0, gy);
            }
            if wants_grad(nodes, *b) {
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                accumulate(grads, b.0, &neg);
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            if wants_grad(nodes, *a) {
                let g: Vec<f64> = gy.iter().zip(db).map(|(g, y)| g * y).collect();
                accumulate(grads, a.0, &g);
            }
            if wants_grad(nodes, *b) {
                let g: Vec<f64> = gy.iter().zip(da).map(|(g, x)| g * x).collect();
                accumulate(grads, b.0, &g);
            }
        }
        Op::Affine { x, scale } => {
            if wants_grad(nodes, *x) {
                let g: Vec<f64> = gy.iter().map(|g| g * scale).collect();
                accumulate(grads, x.0, &g);
            }
        }
        Op::ScaleBy { x, s } => {
            let k = val(*s)[0];
            if wants_grad(nodes, *x) {
                let g: Vec<f64> = gy.iter().map(|g| g * k).collect();
                accumulate(grads, x.0, &g);
            }
            if wants_grad(nodes, *s) {
                let gs: f64 = gy.iter().zip(val(*x)).map(|(g, v)| g * v).sum();
                accumulate(grads, s.0, &[gs]);
            }
        }
        Op::Unary { x, kind } => {
            if wants_grad(nodes, *x) {
                let g: Vec<f64> = gy
                    .iter()
                    .zip(val(*x))
                    .zip(node.value.data())
                    .map(|((g, &xv), &yv)| g * kind.deriv(xv, yv))
                    .collect();
                accumulate(grads, x.0, &g);
            }
        }
        Op::BiasAdd { x, b, axis } => {
            if wants_grad(nodes, *x) {
                accumulate(grads, x.0, gy);
            }
            if wants_grad(nodes, *b) {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gb = slot(grads, b.0, len);
                for o in 0..outer {
                    for (i, acc) in gb.iter_mut().enumerate() {
                        let base = (o * len + i) * inner;
                        *acc += gy[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::ScaleAlong { x, s, axis } => {
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let (dx, ds) = (val(*x), val(*s));
            if wants_grad(nodes, *x) {
                let mut g = gy.to_vec();
                for o in 0..outer {
                    for (i, sv) in ds.iter().enumerate() {
                        let base = (o * len + i) * inner;
                        for v in &mut g[base..base + inner] {
                            *v *= sv;
                        }
                    }
                }
                accumulate(grads, x.0, &g);
            }
            if wants_grad(nodes, *s) {
                let gs = slot(grads, s.0, len);
                for o in 0..outer {
                    for (i, acc) in gs.iter_mut().enumerate() {
                        let base = (o * len + i) * inner;
                        *acc += gy[base..base + inner]
                            .iter()
                            .zip(&dx[base..base + inner])
                            .map(|(g, v)| g * v)
                            .sum::<f64>();
                    }
                }
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn bias_add_broadcasts_over_channels() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 2]));
        let b = g.constant(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let y = g.bias_add(x, b, 0).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]
        );
    }

    #[test]
    fn mismatched_shapes_fail() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }
}
