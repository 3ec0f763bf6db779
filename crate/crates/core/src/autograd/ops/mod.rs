//! Primitive ops. Each submodule adds forward methods to [`Graph`] and the
//! matching vector-Jacobian product used by [`backward`].

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod scan;
mod shape;

pub use elementwise::Unary;

use super::graph::{Node, Var};

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    BiasAdd {
        x: Var,
        b: Var,
        axis: usize,
    },
    ScaleAlong {
        x: Var,
        s: Var,
        axis: usize,
    },
    Matmul(Var, Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    PadReflect {
        x: Var,
        pad: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: conv::ConvGeom,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        geom: conv::ConvGeom,
    },
    Scan(Box<scan::ScanSaved>),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::PadReflect { x, .. }
            | Op::Sum(x)
            | Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::BiasAdd { x, b, .. } => vec![*x, *b],
            Op::ScaleAlong { x, s, .. } => vec![*x, *s],
            Op::Conv2d { x, w, .. } | Op::DepthwiseConv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scan(s) => s.inputs(),
        }
    }
}

pub(crate) fn backward(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Affine { .. }
        | Op::ScaleBy { .. }
        | Op::Unary { .. }
        | Op::BiasAdd { .. }
        | Op::ScaleAlong { .. } => elementwise::backward(nodes, id, gy, grads),
        Op::Matmul(..) => linalg::backward(nodes, id, gy, grads),
        Op::Permute { .. }
        | Op::Reshape(..)
        | Op::Concat { .. }
        | Op::Slice { .. }
        | Op::Gather { .. }
        | Op::PadReflect { .. } => shape::backward(nodes, id, gy, grads),
        Op::Sum(..) | Op::SumAxis { .. } | Op::Softmax { .. } | Op::LayerNorm { .. } => {
            reduce::backward(nodes, id, gy, grads)
        }
        Op::Conv2d { .. } | Op::DepthwiseConv2d { .. } => conv::backward(nodes, id, gy, grads),
        Op::Scan(..) => scan::backward(nodes, id, gy, grads),
    }
}

pub(crate) fn wants_grad(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

pub use conv::ConvGeom;
pub use scan::ScanInputs;
