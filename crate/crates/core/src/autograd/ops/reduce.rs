use super::{wants_grad, Op};
use crate::autograd::graph::{slot, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::dim(op, format!("axis {axis} of {:?}", t.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.add_flops(self.value(x).len());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sums out `axis`. A fully reduced result has shape `[1]`.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            check_axis("sum_axis", &t, axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, data)?
        };
        self.add_flops(self.value(x).len());
        self.push("sum_axis", out, Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(x, axis)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            check_axis("softmax", &t, axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let m = (0..len).map(|l| data[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (data[at(l)] - m).exp();
                        data[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        data[at(l)] /= z;
                    }
                }
            }
            Tensor::new(t.shape(), data)?
        };
        self.add_flops(3 * out.len());
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    /// Normalises to zero mean and unit (population) variance along `axis`.
    /// No affine parameters; compose with `scale_along` / `bias_add`.
    pub fn layer_norm(&self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let (out, rstd) = {
            let t = self.value(x);
            check_axis("layer_norm", &t, axis)?;
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            let mut rstd = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mean = (0..len).map(|l| data[at(l)]).sum::<f64>() / len as f64;
                    let var = (0..len)
                        .map(|l| (data[at(l)] - mean).powi(2))
                        .sum::<f64>()
                        / len as f64;
                    let r = 1.0 / (var + eps).sqrt();
                    if len > 1 {
                        self.note_norm_margin(var.sqrt());
                    }
                    for l in 0..len {
                        data[at(l)] = (data[at(l)] - mean) * r;
                    }
                    rstd.push(r);
                }
            }
            (Tensor::new(t.shape(), data)?, rstd)
        };
        self.add_flops(4 * out.len());
        self.push("layer_norm", out, Op::LayerNorm { x, axis, rstd })
    }
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Sum(x) => {
            if wants_grad(nodes, *x) {
                let n = nodes[x.0].value.len();
                for v in slot(grads, x.0, n).iter_mut() {
                    *v += gy[0];
                }
            }
        }
        Op::SumAxis { x, axis } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let g = slot(grads, x.0, outer * len * inner);
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&gy[o * inner..(o + 1) * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let g = slot(grads, x.0, y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        g[at(l)] += y[at(l)] * (gy[at(l)] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, axis, rstd } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let y = node.value.data();
            let (outer, len, inner) = split_axis(node.value.shape(), *axis);
            let g = slot(grads, x.0, y.len());
            let n = len as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let r = rstd[o * inner + i];
                    let mg: f64 = (0..len).map(|l| gy[at(l)]).sum::<f64>() / n;
                    let mgy: f64 = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum::<f64>() / n;
                    for l in 0..len {
                        g[at(l)] += r * (gy[at(l)] - mg - y[at(l)] * mgy);
                    }
                }
            }
        }
        _ => unreachable!("not a reduction op"),
    }
}
