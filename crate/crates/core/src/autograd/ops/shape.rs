use super::{wants_grad, Op};
use crate::autograd::graph::{slot, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the source flat index under `axes`.
fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        src.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &a)| i * in_strides[a])
                .sum(),
        );
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, src)
}

/// Reflect index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

impl Graph {
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (out, _) = {
            let t = self.value(x);
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            if sorted != (0..t.ndim()).collect::<Vec<_>>() {
                return Err(Error::dim(
                    "permute",
                    format!("axes {axes:?} for shape {:?}", t.shape()),
                ));
            }
            let (out_shape, src) = permute_index(t.shape(), axes);
            let d = t.data();
            (Tensor::new(&out_shape, src.iter().map(|&s| d[s]).collect())?, ())
        };
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(Error::dim("transpose", format!("{:?} is not 2-D", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            if xs.is_empty() {
                return Err(Error::contract("concat of zero tensors"));
            }
            let ts: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
            let first = ts[0].shape().to_vec();
            if axis >= first.len() {
                return Err(Error::dim("concat", format!("axis {axis} of {first:?}")));
            }
            for t in &ts {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !ok {
                    return Err(Error::dim("concat", format!("{first:?} vs {s:?}")));
                }
            }
            let total: usize = ts.iter().map(|t| t.shape()[axis]).sum();
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&first, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in &ts {
                    let len = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&shape, data)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::dim(
                    "slice",
                    format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
                ));
            }
            let (outer, full, inner) = split_axis(t.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        self.push("slice", out, Op::Slice { x, axis, start })
    }

    /// Row gather on a matrix: `out[i, :] = x[index[i], :]`.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.ndim() != 2 || index.is_empty() || index.iter().any(|&i| i >= t.shape()[0]) {
                return Err(Error::dim(
                    "gather_rows",
                    format!("{} indices into {:?}", index.len(), t.shape()),
                ));
            }
            let cols = t.shape()[1];
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index {
                data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
            }
            Tensor::new(&[index.len(), cols], data)?
        };
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Mirror padding of the two spatial axes of a `C×H×W` tensor.
    pub fn pad_reflect(&self, x: Var, pad: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.ndim() != 3 || pad >= t.shape()[1] || pad >= t.shape()[2] {
                return Err(Error::dim(
                    "pad_reflect",
                    format!("pad {pad} on {:?}", t.shape()),
                ));
            }
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            let mut data = Vec::with_capacity(c * hp * wp);
            for ch in 0..c {
                for y in 0..hp {
                    let sy = reflect(y as isize - pad as isize, h);
                    for xx in 0..wp {
                        let sx = reflect(xx as isize - pad as isize, w);
                        data.push(t.data()[(ch * h + sy) * w + sx]);
                    }
                }
            }
            Tensor::new(&[c, hp, wp], data)?
        };
        self.push("pad_reflect", out, Op::PadReflect { x, pad })
    }
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Permute { x, axes } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let xs = nodes[x.0].value.shape();
            let (_, src) = permute_index(xs, axes);
            let g = slot(grads, x.0, src.len());
            for (o, &s) in src.iter().enumerate() {
                g[s] += gy[o];
            }
        }
        Op::Reshape(x) => {
            if wants_grad(nodes, *x) {
                crate::autograd::graph::accumulate(grads, x.0, gy);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            let row: usize = node.value.shape()[*axis] * inner;
            for v in xs {
                let len = nodes[v.0].value.shape()[*axis] * inner;
                if wants_grad(nodes, *v) {
                    let n = nodes[v.0].value.len();
                    let g = slot(grads, v.0, n);
                    for o in 0..outer {
                        let src = &gy[o * row + offset..o * row + offset + len];
                        for (d, s) in g[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let xs = nodes[x.0].value.shape();
            let (outer, full, inner) = split_axis(xs, *axis);
            let len = node.value.shape()[*axis];
            let g = slot(grads, x.0, outer * full * inner);
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                for (d, s) in g[dst..dst + len * inner]
                    .iter_mut()
                    .zip(&gy[src..src + len * inner])
                {
                    *d += s;
                }
            }
        }
        Op::Gather { x, index } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let xs = nodes[x.0].value.shape();
            let cols = xs[1];
            let g = slot(grads, x.0, xs[0] * cols);
            for (r, &i) in index.iter().enumerate() {
                for c in 0..cols {
                    g[i * cols + c] += gy[r * cols + c];
                }
            }
        }
        Op::PadReflect { x, pad } => {
            if !wants_grad(nodes, *x) {
                return;
            }
            let xs = nodes[x.0].value.shape();
            let (c, h, w) = (xs[0], xs[1], xs[2]);
            let (hp, wp) = (h + 2 * pad, w + 2 * pad);
            let g = slot(grads, x.0, c * h * w);
            for ch in 0..c {
                for y in 0..hp {
                    let sy = reflect(y as isize - *pad as isize, h);
                    for xx in 0..wp {
                        let sx = reflect(xx as isize - *pad as isize, w);
                        g[(ch * h + sy) * w + sx] += gy[(ch * hp + y) * wp + xx];
                    }
                }
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
