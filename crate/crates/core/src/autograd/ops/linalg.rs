use super::{wants_grad, Op};
use crate::autograd::graph::{accumulate, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// `a[m×k] · b[k×n]`, parallel over output rows.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    exec::chunks_mut(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    exec::chunks_mut(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    exec::chunks_mut(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

impl Graph {
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, flops) = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::dim(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let data = matmul_raw(ta.data(), tb.data(), m, k, n);
            (Tensor::new(&[m, n], data)?, m * k * n)
        };
        self.add_flops(flops);
        self.push("matmul", out, Op::Matmul(a, b))
    }
}

pub(super) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let Op::Matmul(a, b) = &nodes[id].op else {
        unreachable!()
    };
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    if wants_grad(nodes, *a) {
        // dA = dC · Bᵀ
        let g = matmul_nt(gy, tb.data(), m, n, k);
        accumulate(grads, a.0, &g);
    }
    if wants_grad(nodes, *b) {
        // dB = Aᵀ · dC
        let g = matmul_tn(ta.data(), gy, m, k, n);
        accumulate(grads, b.0, &g);
    }
}
