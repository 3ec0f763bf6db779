//! Finite-difference verification of every differentiable path.
//!
//! Each check draws random problems: inputs, and for network blocks a
//! parameter store with perturbed weights. Its scalar objective is
//! `Σ R ⊙ out` for a fixed random `R`, so every output element contributes.
//!
//! Derivatives are Richardson-extrapolated central differences. Primitive
//! ops and the losses are probed element by element, and the reported error is
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂)`.
//! Network blocks and the full model are probed along one random direction
//! through all inputs and parameters at once, where the same ratio is taken
//! between the two directional derivatives.
//!
//! A draw is discarded and redrawn when it sits near a point where the
//! function bends too sharply for finite differences: an `abs` input within
//! [`KINK_MARGIN`]·h of zero, or a `layer_norm` group whose standard
//! deviation is below [`NORM_MARGIN`]·h.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvGeom, Graph, ScanInputs, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::loss::{sobel_grad, ssim, stage1_loss, stage2_loss};
use crate::nn::attention::{channel_attention, project_qkv, transformer_block, QkvProjection, TransformerBlockParams};
use crate::nn::fusion::{
    attention_weighting, decode, modality_attentions, prefuse_transformer, CrossModalParams, DecoderParams,
};
use crate::nn::model::{ModelConfig, TmambaModel};
use crate::nn::ssm::{cross_scan_2d, selective_scan, vmamba_block, SsmParams, VmambaBlockParams};
use crate::nn::tmamba::{
    shallow_extract, tm_channel_inject, tm_positional_inject, tmamba_block, BlockArch, BranchLayout,
    InteractionParams, MambaKind, ShallowExtractor, TmambaBlockParams,
};
use crate::nn::{Ctx, FeatureMap, Provenance};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Coarser of the two central-difference steps.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Cases per check in the full suite.
pub const SUITE_CASES: usize = 50;
/// Draws with an `abs` input closer than `KINK_MARGIN · FD_STEP` to zero are redrawn.
pub const KINK_MARGIN: f64 = 10.0;
/// Draws with a normalised group whose spread is below `NORM_MARGIN · FD_STEP` are redrawn.
pub const NORM_MARGIN: f64 = 100.0;
const MAX_REDRAWS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    Elementwise,
    Directional,
}

type BuildFn = Box<dyn Fn(&Ctx, &[Var]) -> Result<Var> + Send + Sync>;
type GenerateFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Problem> + Send + Sync>;

/// One random instance: differentiable inputs, parameters, and the
/// computation to check.
pub struct Problem {
    pub inputs: Vec<Tensor>,
    pub store: ParamStore,
    pub build: BuildFn,
}

pub struct GradCheck {
    pub name: &'static str,
    pub probe: Probe,
    generate: GenerateFn,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub probe: Probe,
    pub cases: usize,
    pub redrawn: usize,
    pub worst_rel: f64,
    pub failures: usize,
    pub elapsed: Duration,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.worst_rel < REL_TOL
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{:<4} {:<28} {:>3} cases  worst rel {:.2e}  redrawn {:>3}  {:?}  {:.2?}",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.name,
                    c.cases,
                    c.worst_rel,
                    c.redrawn,
                    c.probe,
                    c.elapsed
                )
            })
            .collect()
    }
}

/// Objective value and the smallest `|x|` seen at an `abs` node.
fn objective(p: &Problem, store: &ParamStore, inputs: &[Tensor], weights: Option<&Tensor>) -> Result<(f64, f64, Vec<usize>)> {
    let g = Graph::with_strict_finite(true);
    let cx = Ctx::new(&g, store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (p.build)(&cx, &vars)?;
    let shape = g.shape(out);
    let value = match weights {
        Some(r) => {
            let rv = g.constant(r.clone());
            g.item(g.sum(g.mul(out, rv)?)?)
        }
        None => {
            let v = g.value(out);
            v.data().iter().sum()
        }
    };
    Ok((value, smoothness(&g), shape))
}

/// Distance to the nearest sharp bend, in the units of the step size.
fn smoothness(g: &Graph) -> f64 {
    (g.abs_margin() / KINK_MARGIN).min(g.norm_margin() / NORM_MARGIN)
}

struct Analytic {
    input_grads: Vec<Tensor>,
    param_grads: Vec<Tensor>,
    margin: f64,
}

fn analytic(p: &Problem, weights: &Tensor) -> Result<Analytic> {
    let g = Graph::with_strict_finite(true);
    let cx = Ctx::new(&g, &p.store);
    let vars: Vec<Var> = p.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (p.build)(&cx, &vars)?;
    let rv = g.constant(weights.clone());
    let loss = g.sum(g.mul(out, rv)?)?;
    g.backward(loss)?;
    let input_grads = vars
        .iter()
        .zip(&p.inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut param_grads: Vec<Tensor> = p.store.iter().map(|(_, q)| Tensor::zeros(q.value.shape())).collect();
    for (id, gr) in g.param_grads()? {
        param_grads[id.0] = gr;
    }
    Ok(Analytic {
        input_grads,
        param_grads,
        margin: smoothness(&g),
    })
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

fn relative(diff: f64, a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Richardson-extrapolated central difference from steps `h` and `h/2`,
/// which cancels the second-order truncation term. `eval(t)` returns the
/// objective at offset `t` and its [`smoothness`]; `None` means a sharp
/// bend is within reach.
fn richardson(h: f64, mut eval: impl FnMut(f64) -> Result<(f64, f64)>) -> Result<Option<f64>> {
    let mut central = |step: f64| -> Result<Option<f64>> {
        let (fp, mp) = eval(step)?;
        let (fm, mm) = eval(-step)?;
        if mp.min(mm) < 0.5 * h {
            return Ok(None);
        }
        Ok(Some((fp - fm) / (2.0 * step)))
    };
    let (Some(d1), Some(d2)) = (central(h)?, central(0.5 * h)?) else {
        return Ok(None);
    };
    Ok(Some((4.0 * d2 - d1) / 3.0))
}

/// Error of one problem, or `None` if it sits too close to a kink.
fn check_problem(p: &Problem, probe: Probe, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let h = FD_STEP;
    let (_, _, shape) = objective(p, &p.store, &p.inputs, None)?;
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let an = analytic(p, &weights)?;
    if an.margin < h {
        return Ok(None);
    }
    match probe {
        Probe::Elementwise => {
            let mut numeric = Vec::new();
            let mut inputs = p.inputs.clone();
            for i in 0..inputs.len() {
                for j in 0..inputs[i].len() {
                    let x0 = inputs[i].data()[j];
                    let d = richardson(h, |t| {
                        inputs[i].data_mut()[j] = x0 + t;
                        let r = objective(p, &p.store, &inputs, Some(&weights));
                        inputs[i].data_mut()[j] = x0;
                        r.map(|(f, m, _)| (f, m))
                    })?;
                    match d {
                        Some(d) => numeric.push(d),
                        None => return Ok(None),
                    }
                }
            }
            let analytic: Vec<f64> = an.input_grads.iter().flat_map(|t| t.data().to_vec()).collect();
            let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
            Ok(Some(relative(
                diff,
                norm(analytic.iter().copied()),
                norm(numeric.iter().copied()),
            )))
        }
        Probe::Directional => {
            let dir_in: Vec<Tensor> = p
                .inputs
                .iter()
                .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let dir_par: Vec<Tensor> = p
                .store
                .iter()
                .map(|(_, q)| Tensor::from_fn(q.value.shape(), |_| rng.random_range(-1.0..1.0)))
                .collect();
            let numeric = richardson(h, |t| {
                let inputs: Vec<Tensor> = p
                    .inputs
                    .iter()
                    .zip(&dir_in)
                    .map(|(x, u)| Tensor::from_fn(x.shape(), |k| x.data()[k] + t * u.data()[k]))
                    .collect();
                let mut store = p.store.clone();
                for (id, u) in p.store.ids().zip(&dir_par) {
                    for (v, du) in store.value_mut(id).data_mut().iter_mut().zip(u.data()) {
                        *v += t * du;
                    }
                }
                objective(p, &store, &inputs, Some(&weights)).map(|(f, m, _)| (f, m))
            })?;
            let Some(numeric) = numeric else {
                return Ok(None);
            };
            let dot = |gs: &[Tensor], us: &[Tensor]| -> f64 {
                gs.iter()
                    .zip(us)
                    .map(|(g, u)| g.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let analytic = dot(&an.input_grads, &dir_in) + dot(&an.param_grads, &dir_par);
            Ok(Some(relative((analytic - numeric).abs(), analytic, numeric)))
        }
    }
}

pub fn run_check(check: &GradCheck, cases: usize, seed: u64) -> Result<CheckReport> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures, mut redrawn) = (0.0f64, 0, 0);
    for _ in 0..cases {
        let mut attempts = 0;
        let rel = loop {
            let p = (check.generate)(&mut rng)?;
            if let Some(rel) = check_problem(&p, check.probe, &mut rng)? {
                break rel;
            }
            redrawn += 1;
            attempts += 1;
            if attempts > MAX_REDRAWS {
                return Err(Error::State(format!(
                    "{}: no draw away from a sharp bend after {MAX_REDRAWS} attempts",
                    check.name
                )));
            }
        };
        // written so that a NaN error counts as a failure
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(rel < REL_TOL) {
            failures += 1;
        }
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(CheckReport {
        name: check.name,
        probe: check.probe,
        cases,
        redrawn,
        worst_rel: worst,
        failures,
        elapsed: t0.elapsed(),
    })
}

/// Runs every check; checks are independent and run concurrently.
pub fn run_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let checks = suite();
    let reports = exec::map_coarse(checks.len(), |i| run_check(&checks[i], cases, seed.wrapping_add(i as u64)));
    Ok(SuiteReport {
        checks: reports.into_iter().collect::<Result<_>>()?,
        elapsed: t0.elapsed(),
    })
}

// ---- problem construction helpers ----

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize) -> Vec<usize> {
    let rank = rng.random_range(1..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=max_dim)).collect()
}

fn op(inputs: Vec<Tensor>, build: impl Fn(&Graph, &[Var]) -> Result<Var> + Send + Sync + 'static) -> Problem {
    Problem {
        inputs,
        store: ParamStore::new(),
        build: Box::new(move |cx, v| build(cx.g, v)),
    }
}

/// Shifts every parameter by uniform noise so that zero-initialised
/// residual projections do not hide gradient paths.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn with_params<P: Send + Sync + 'static>(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    make: impl FnOnce(&mut Init) -> Result<P>,
    build: impl Fn(&Ctx, &[Var], &P) -> Result<Var> + Send + Sync + 'static,
) -> Result<Problem> {
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.random());
    let params = make(&mut Init::new(&mut store, &mut prng))?;
    jitter(&mut store, rng, 0.3);
    Ok(Problem {
        inputs,
        store,
        build: Box::new(move |cx, v| build(cx, v, &params)),
    })
}

fn fmap(cx: &Ctx, v: Var, prov: Provenance) -> Result<FeatureMap> {
    FeatureMap::new(cx.g, v, prov)
}

const LAYOUTS: [BranchLayout; 6] = [
    BranchLayout { transformer: true, mamba: None, interaction: false },
    BranchLayout { transformer: false, mamba: Some(MambaKind::Ssm), interaction: false },
    BranchLayout { transformer: true, mamba: Some(MambaKind::Ssm), interaction: false },
    BranchLayout { transformer: true, mamba: Some(MambaKind::Ssm), interaction: true },
    BranchLayout { transformer: true, mamba: Some(MambaKind::Conv), interaction: true },
    BranchLayout { transformer: true, mamba: Some(MambaKind::Conv), interaction: false },
];

fn check(name: &'static str, probe: Probe, f: impl Fn(&mut ChaCha8Rng) -> Result<Problem> + Send + Sync + 'static) -> GradCheck {
    GradCheck {
        name,
        probe,
        generate: Box::new(f),
    }
}

fn elementwise_unary(
    name: &'static str,
    lo: f64,
    hi: f64,
    away: bool,
    f: fn(&Graph, Var) -> Result<Var>,
) -> GradCheck {
    check(name, Probe::Elementwise, move |rng| {
        let s = rand_shape(rng, 3, 4);
        let x = if away { rand_away(rng, &s, lo, hi) } else { rand_t(rng, &s, lo, hi) };
        Ok(op(vec![x], move |g, v| f(g, v[0])))
    })
}

/// Every check in the suite.
pub fn suite() -> Vec<GradCheck> {
    let mut v = vec![
        check("add", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0)], |g, v| g.add(v[0], v[1])))
        }),
        check("sub", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0)], |g, v| g.sub(v[0], v[1])))
        }),
        check("mul", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &s, -1.0, 1.0)], |g, v| g.mul(v[0], v[1])))
        }),
        check("div", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), rand_away(rng, &s, 0.5, 2.0)], |g, v| g.div(v[0], v[1])))
        }),
        check("affine", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.affine(v[0], a, b)))
        }),
        check("neg", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], |g, v| g.neg(v[0])))
        }),
        check("scale_by", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), rand_t(rng, &[1], -2.0, 2.0)], |g, v| g.scale_by(v[0], v[1])))
        }),
        elementwise_unary("exp", -2.0, 2.0, false, |g, x| g.exp(x)),
        elementwise_unary("sigmoid", -4.0, 4.0, false, |g, x| g.sigmoid(x)),
        elementwise_unary("silu", -4.0, 4.0, false, |g, x| g.silu(x)),
        elementwise_unary("gelu", -3.0, 3.0, false, |g, x| g.gelu(x)),
        elementwise_unary("softplus", -5.0, 5.0, false, |g, x| g.softplus(x)),
        elementwise_unary("abs", 0.01, 2.0, true, |g, x| g.abs(x)),
        elementwise_unary("square", -2.0, 2.0, false, |g, x| g.square(x)),
        elementwise_unary("recip", 0.5, 2.0, true, |g, x| g.recip(x)),
        check("bias_add", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            let b = rand_t(rng, &[s[axis]], -1.0, 1.0);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), b], move |g, v| g.bias_add(v[0], v[1], axis)))
        }),
        check("scale_along", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            let b = rand_t(rng, &[s[axis]], -2.0, 2.0);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0), b], move |g, v| g.scale_along(v[0], v[1], axis)))
        }),
        check("matmul", Probe::Elementwise, |rng| {
            let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
            Ok(op(vec![rand_t(rng, &[m, k], -1.0, 1.0), rand_t(rng, &[k, n], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1])))
        }),
        check("sum", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], |g, v| g.sum(v[0])))
        }),
        check("mean", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], |g, v| g.mean(v[0])))
        }),
        check("sum_axis", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.sum_axis(v[0], axis)))
        }),
        check("mean_axis", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.mean_axis(v[0], axis)))
        }),
        check("softmax", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            Ok(op(vec![rand_t(rng, &s, -3.0, 3.0)], move |g, v| g.softmax(v[0], axis)))
        }),
        check("layer_norm", Probe::Elementwise, |rng| {
            let mut s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            s[axis] = rng.random_range(2..=5);
            Ok(op(vec![rand_t(rng, &s, -2.0, 2.0)], move |g, v| g.layer_norm(v[0], axis, 1e-5)))
        }),
        check("permute", Probe::Elementwise, |rng| {
            let s: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4)).collect();
            let mut axes = vec![0, 1, 2];
            rand::seq::SliceRandom::shuffle(&mut axes[..], rng);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.permute(v[0], &axes)))
        }),
        check("transpose", Probe::Elementwise, |rng| {
            let s = [rng.random_range(1..=5), rng.random_range(1..=5)];
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], |g, v| g.transpose(v[0])))
        }),
        check("reshape", Probe::Elementwise, |rng| {
            let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
            Ok(op(vec![rand_t(rng, &[a * b], -1.0, 1.0)], move |g, v| g.reshape(v[0], &[b, a])))
        }),
        check("concat", Probe::Elementwise, |rng| {
            let s = rand_shape(rng, 3, 3);
            let axis = rng.random_range(0..s.len());
            let n = rng.random_range(2..=3);
            let parts = (0..n)
                .map(|_| {
                    let mut t = s.clone();
                    t[axis] = rng.random_range(1..=3);
                    rand_t(rng, &t, -1.0, 1.0)
                })
                .collect();
            Ok(op(parts, move |g, v| g.concat(v, axis)))
        }),
        check("slice", Probe::Elementwise, |rng| {
            let mut s = rand_shape(rng, 3, 4);
            let axis = rng.random_range(0..s.len());
            s[axis] = rng.random_range(2..=5);
            let start = rng.random_range(0..s[axis]);
            let len = rng.random_range(1..=s[axis] - start);
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.slice(v[0], axis, start, len)))
        }),
        check("gather_rows", Probe::Elementwise, |rng| {
            let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=4));
            let n = rng.random_range(1..=7);
            let index: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
            Ok(op(vec![rand_t(rng, &[r, c], -1.0, 1.0)], move |g, v| g.gather_rows(v[0], &index)))
        }),
        check("pad_reflect", Probe::Elementwise, |rng| {
            let s = [rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=5)];
            let pad = rng.random_range(1..s[1].min(s[2]));
            Ok(op(vec![rand_t(rng, &s, -1.0, 1.0)], move |g, v| g.pad_reflect(v[0], pad)))
        }),
        check("conv2d", Probe::Elementwise, |rng| {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let geom = ConvGeom {
                stride: rng.random_range(1..=2),
                dilation: rng.random_range(1..=2),
                pad: rng.random_range(0..=k / 2 * 2),
            };
            let (h, w) = (rng.random_range(5..=7), rng.random_range(5..=7));
            Ok(op(
                vec![rand_t(rng, &[ci, h, w], -1.0, 1.0), rand_t(rng, &[co, ci, k, k], -1.0, 1.0)],
                move |g, v| g.conv2d(v[0], v[1], geom),
            ))
        }),
        check("depthwise_conv2d", Probe::Elementwise, |rng| {
            let c = rng.random_range(1..=3);
            let dilation = rng.random_range(1..=2);
            let pad = rng.random_range(0..=dilation);
            let (h, w) = (rng.random_range(5..=7), rng.random_range(5..=7));
            Ok(op(
                vec![rand_t(rng, &[c, h, w], -1.0, 1.0), rand_t(rng, &[c, 1, 3, 3], -1.0, 1.0)],
                move |g, v| g.depthwise_conv2d(v[0], v[1], pad, dilation),
            ))
        }),
        check("ssm_scan", Probe::Elementwise, |rng| {
            let (l, d, n) = (rng.random_range(1..=6), rng.random_range(1..=3), rng.random_range(1..=3));
            Ok(op(
                vec![
                    rand_t(rng, &[l, d], -1.0, 1.0),
                    rand_t(rng, &[l, d], 0.1, 1.0),
                    rand_t(rng, &[d, n], -2.0, -0.2),
                    rand_t(rng, &[l, n], -1.0, 1.0),
                    rand_t(rng, &[l, n], -1.0, 1.0),
                    rand_t(rng, &[d], -1.0, 1.0),
                ],
                |g, v| {
                    g.ssm_scan(ScanInputs {
                        x: v[0],
                        delta: v[1],
                        a: v[2],
                        b: v[3],
                        c: v[4],
                        d: v[5],
                    })
                },
            ))
        }),
        // losses, probed with respect to every image input
        check("ssim", Probe::Elementwise, |rng| {
            let (h, w) = (rng.random_range(11..=13), rng.random_range(11..=13));
            Ok(op(
                vec![rand_t(rng, &[1, h, w], 0.0, 1.0), rand_t(rng, &[1, h, w], 0.0, 1.0)],
                |g, v| ssim(g, v[0], v[1]),
            ))
        }),
        check("sobel_grad", Probe::Elementwise, |rng| {
            let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
            Ok(op(vec![rand_t(rng, &[1, h, w], 0.0, 1.0)], |g, v| sobel_grad(g, v[0])))
        }),
        check("stage1_loss", Probe::Elementwise, |rng| {
            let (h, w) = (rng.random_range(11..=12), rng.random_range(11..=12));
            let ir = rand_t(rng, &[1, h, w], 0.0, 1.0);
            let vis = rand_t(rng, &[1, h, w], 0.0, 1.0);
            Ok(op(
                vec![rand_t(rng, &[1, h, w], 0.0, 1.0), rand_t(rng, &[1, h, w], 0.0, 1.0)],
                move |g, v| {
                    let (a, b) = (g.constant(ir.clone()), g.constant(vis.clone()));
                    Ok(stage1_loss(g, a, v[0], b, v[1])?.total)
                },
            ))
        }),
        check("stage2_loss", Probe::Elementwise, |rng| {
            let (h, w) = (rng.random_range(6..=10), rng.random_range(6..=10));
            let ir = rand_t(rng, &[1, h, w], 0.0, 1.0);
            let vis = rand_t(rng, &[1, h, w], 0.0, 1.0);
            Ok(op(vec![rand_t(rng, &[1, h, w], 0.0, 1.0)], move |g, v| {
                let (a, b) = (g.constant(ir.clone()), g.constant(vis.clone()));
                Ok(stage2_loss(g, v[0], a, b)?.total)
            }))
        }),
    ];
    v.extend(block_checks());
    v
}

fn small_map(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
    rand_t(rng, &[c, h, w], -1.0, 1.0)
}

fn block_checks() -> Vec<GradCheck> {
    vec![
        check("channel_attention", Probe::Directional, |rng| {
            let c = rng.random_range(1..=4);
            let x = small_map(rng, c);
            with_params(rng, vec![x], |i| QkvProjection::new(i, c), |cx, v, p| {
                let t = project_qkv(cx, &fmap(cx, v[0], Provenance::Shallow)?, p)?;
                let (out, a) = channel_attention(cx, &t)?;
                // both the mixed values and the attention matrix are checked
                let flat = |x: Var| {
                    let n = cx.g.shape(x).iter().product();
                    cx.g.reshape(x, &[n])
                };
                cx.g.concat(&[flat(out)?, flat(a)?], 0)
            })
        }),
        check("transformer_block", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let x = small_map(rng, c);
            with_params(rng, vec![x], |i| TransformerBlockParams::new(i, c), |cx, v, p| {
                Ok(transformer_block(cx, &fmap(cx, v[0], Provenance::Shallow)?, p)?.var)
            })
        }),
        check("selective_scan", Probe::Directional, |rng| {
            let (l, d, n) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=4));
            let x = rand_t(rng, &[l, d], -1.0, 1.0);
            with_params(rng, vec![x], |i| SsmParams::new(i, d, n), |cx, v, p| selective_scan(cx, v[0], p))
        }),
        check("cross_scan_2d", Probe::Directional, |rng| {
            let (d, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let x = rand_t(rng, &[d, h, w], -1.0, 1.0);
            with_params(rng, vec![x], |i| SsmParams::new(i, d, n), |cx, v, p| {
                Ok(cross_scan_2d(cx, &fmap(cx, v[0], Provenance::Mamba)?, p)?.var)
            })
        }),
        check("vmamba_block", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let x = small_map(rng, c);
            with_params(rng, vec![x], |i| VmambaBlockParams::new(i, c, 2, 2), |cx, v, p| {
                Ok(vmamba_block(cx, &fmap(cx, v[0], Provenance::Shallow)?, p)?.var)
            })
        }),
        check("tm_positional_inject", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let x = small_map(rng, c);
            let y = rand_t(rng, x.shape(), -1.0, 1.0);
            with_params(rng, vec![x, y], |i| InteractionParams::new(i, c), |cx, v, p| {
                let m = fmap(cx, v[0], Provenance::Mamba)?;
                let t = fmap(cx, v[1], Provenance::Transformer)?;
                Ok(tm_positional_inject(cx, &m, &t, p)?.var)
            })
        }),
        check("tm_channel_inject", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let x = small_map(rng, c);
            let y = rand_t(rng, x.shape(), -1.0, 1.0);
            with_params(rng, vec![x, y], |i| InteractionParams::new(i, c), |cx, v, p| {
                let m = fmap(cx, v[0], Provenance::Mamba)?;
                let t = fmap(cx, v[1], Provenance::Transformer)?;
                Ok(tm_channel_inject(cx, &m, &t, p)?.var)
            })
        }),
        check("shallow_extract", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let x = small_map(rng, 1);
            with_params(rng, vec![x], |i| ShallowExtractor::new(i, c), |cx, v, p| {
                Ok(shallow_extract(cx, v[0], p)?.var)
            })
        }),
        check("tmamba_block", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let layout = LAYOUTS[rng.random_range(0..LAYOUTS.len())];
            let arch = BlockArch {
                channels: c,
                state_dim: 2,
                expansion: rng.random_range(1..=2),
            };
            let x = small_map(rng, c);
            with_params(rng, vec![x], |i| TmambaBlockParams::new(i, &arch, layout), |cx, v, p| {
                let o = tmamba_block(cx, &fmap(cx, v[0], Provenance::Shallow)?, p)?;
                let outs: Vec<Var> = o.transformer.into_iter().chain(o.mamba).map(|f| f.var).collect();
                cx.g.concat(&outs, 0)
            })
        }),
        check("cross_modal_weighting", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let xv = small_map(rng, c);
            let xi = rand_t(rng, xv.shape(), -1.0, 1.0);
            with_params(rng, vec![xv, xi], |i| CrossModalParams::new(i, c), |cx, v, p| {
                let (h, w) = (cx.g.shape(v[0])[1], cx.g.shape(v[0])[2]);
                let fv = fmap(cx, v[0], Provenance::Transformer)?;
                let fi = fmap(cx, v[1], Provenance::Transformer)?;
                let m = modality_attentions(cx, &fv, &fi, p)?;
                let (a, _, _) = attention_weighting(cx, &fv, &fi, m.a_v, m.a_i, &p.weights, None)?;
                Ok(prefuse_transformer(cx, a, m.v_i, m.v_v, h, w)?.var)
            })
        }),
        check("decode", Probe::Directional, |rng| {
            let c = rng.random_range(1..=3);
            let inputs = rng.random_range(1..=2);
            let xs: Vec<Tensor> = {
                let first = small_map(rng, c);
                let shape = first.shape().to_vec();
                std::iter::once(first)
                    .chain((1..inputs).map(|_| rand_t(rng, &shape, -1.0, 1.0)))
                    .collect()
            };
            with_params(rng, xs, |i| DecoderParams::new(i, c, inputs), |cx, v, p| {
                let maps = v
                    .iter()
                    .map(|&x| fmap(cx, x, Provenance::Fused))
                    .collect::<Result<Vec<_>>>()?;
                decode(cx, maps.first(), maps.get(1), p)
            })
        }),
        check("model_reconstruct", Probe::Directional, |rng| model_problem(rng, false)),
        check("model_fuse", Probe::Directional, |rng| model_problem(rng, true)),
    ]
}

fn model_problem(rng: &mut ChaCha8Rng, fuse: bool) -> Result<Problem> {
    let c = rng.random_range(1..=2);
    model_problem_with(rng, fuse, c, None, None)
}

fn model_problem_with(rng: &mut ChaCha8Rng, fuse: bool, channels: usize, layout: Option<usize>, cross: Option<bool>) -> Result<Problem> {
    let mut cfg = ModelConfig::new(channels);
    cfg.state_dim = 2;
    cfg.expansion = 1;
    cfg.layout = LAYOUTS[layout.unwrap_or_else(|| rng.random_range(0..LAYOUTS.len()))];
    cfg.cross_modal_attention = cross.unwrap_or_else(|| rng.random_bool(0.7));
    let (h, w) = (rng.random_range(3..=5), rng.random_range(3..=5));
    let a = rand_t(rng, &[1, h, w], 0.0, 1.0);
    let b = rand_t(rng, &[1, h, w], 0.0, 1.0);
    let mut store = ParamStore::new();
    let model = TmambaModel::new(cfg, &mut store, rng.random())?;
    jitter(&mut store, rng, 0.3);
    Ok(Problem {
        inputs: vec![a, b],
        store,
        build: Box::new(move |cx, v| {
            if fuse {
                Ok(model.fuse(cx, v[0], v[1], None)?.fused)
            } else {
                let ra = model.reconstruct(cx, v[0])?;
                let rb = model.reconstruct(cx, v[1])?;
                cx.g.concat(&[ra, rb], 0)
            }
        }),
    })
}
