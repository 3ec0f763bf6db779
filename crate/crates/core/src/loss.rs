//! Training objectives for the two stages.
//!
//! Stage I (restoration): per modality `MSE + (1 - SSIM)`, summed.
//! Stage II (fusion): `mean|F - max(a, b)| + mean| |∇F| - max(|∇a|, |∇b|) |`.

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    I,
    II,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub stage: Stage,
    pub intensity: f64,
    /// `Σ(1 - SSIM)` in stage I, the gradient term in stage II.
    pub ssim_or_grad: f64,
    pub total: f64,
}

/// A loss node on the tape together with its readable breakdown.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Normalised 2-D Gaussian, `[1, 1, k, k]`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Tensor {
    let c = (k as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    Tensor::from_fn(&[1, 1, k, k], |i| g1[i / k] * g1[i % k])
}

fn image_dims(g: &Graph, op: &'static str, x: Var) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::dim(op, format!("expected 1×H×W, got {s:?}")));
    }
    Ok((s[1], s[2]))
}

fn check_pair(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
    let d = image_dims(g, op, a)?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(d)
}

/// Mean SSIM over all valid 11×11 windows.
pub fn ssim(g: &Graph, x: Var, y: Var) -> Result<Var> {
    let (h, w) = check_pair(g, "ssim", x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let win = g.constant(gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA));
    let geom = ConvGeom {
        stride: 1,
        pad: 0,
        dilation: 1,
    };
    let filt = |v: Var| g.conv2d(v, win, geom);
    let (mx, my) = (filt(x)?, filt(y)?);
    let (mxx, myy) = (g.square(mx)?, g.square(my)?);
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(filt(g.square(x)?)?, mxx)?;
    let syy = g.sub(filt(g.square(y)?)?, myy)?;
    let sxy = g.sub(filt(g.mul(x, y)?)?, mxy)?;
    let num = g.mul(g.affine(mxy, 2.0, SSIM_C1)?, g.affine(sxy, 2.0, SSIM_C2)?)?;
    let den = g.mul(
        g.affine(g.add(mxx, myy)?, 1.0, SSIM_C1)?,
        g.affine(g.add(sxx, syy)?, 1.0, SSIM_C2)?,
    )?;
    g.mean(g.div(num, den)?)
}

fn mse(g: &Graph, a: Var, b: Var) -> Result<Var> {
    g.mean(g.square(g.sub(a, b)?)?)
}

/// Restoration loss for both modalities.
pub fn stage1_loss(g: &Graph, ir: Var, ir_hat: Var, vis: Var, vis_hat: Var) -> Result<StageLoss> {
    check_pair(g, "stage1_loss", ir, ir_hat)?;
    check_pair(g, "stage1_loss", vis, vis_hat)?;
    let intensity = g.add(mse(g, ir_hat, ir)?, mse(g, vis_hat, vis)?)?;
    let s = g.add(ssim(g, ir, ir_hat)?, ssim(g, vis, vis_hat)?)?;
    let structural = g.affine(s, -1.0, 2.0)?;
    let total = g.add(intensity, structural)?;
    Ok(StageLoss {
        total,
        breakdown: LossBreakdown {
            stage: Stage::I,
            intensity: g.item(intensity),
            ssim_or_grad: g.item(structural),
            total: g.item(total),
        },
    })
}

/// `[Gx; Gy]` as a `[2, 1, 3, 3]` kernel.
pub fn sobel_kernels() -> Tensor {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    Tensor::new(&[2, 1, 3, 3], gx.iter().chain(&gy).copied().collect()).expect("sobel shape")
}

/// `|Gx * x| + |Gy * x|` with reflect padding.
pub fn sobel_grad(g: &Graph, x: Var) -> Result<Var> {
    let (h, w) = image_dims(g, "sobel_grad", x)?;
    if h < 3 || w < 3 {
        return Err(Error::contract(format!("sobel_grad needs at least 3×3, got {h}×{w}")));
    }
    let padded = g.pad_reflect(x, 1)?;
    let k = g.constant(sobel_kernels());
    let resp = g.conv2d(
        padded,
        k,
        ConvGeom {
            stride: 1,
            pad: 0,
            dilation: 1,
        },
    )?;
    let mag = g.sum_axis(g.abs(resp)?, 0)?;
    g.reshape(mag, &[1, h, w])
}

fn elementwise_max(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i].max(b.data()[i]))
}

/// Fusion loss; only `fused` needs to carry gradient.
pub fn stage2_loss(g: &Graph, fused: Var, ir: Var, vis: Var) -> Result<StageLoss> {
    check_pair(g, "stage2_loss", fused, ir)?;
    check_pair(g, "stage2_loss", fused, vis)?;
    let target = elementwise_max(&g.value(ir), &g.value(vis));
    let target = g.constant(target);
    let intensity = g.mean(g.abs(g.sub(fused, target)?)?)?;
    let (gi, gv) = (sobel_grad(g, ir)?, sobel_grad(g, vis)?);
    let grad_target = elementwise_max(&g.value(gi), &g.value(gv));
    let grad_target = g.constant(grad_target);
    let gf = sobel_grad(g, fused)?;
    let grad = g.mean(g.abs(g.sub(gf, grad_target)?)?)?;
    let total = g.add(intensity, grad)?;
    Ok(StageLoss {
        total,
        breakdown: LossBreakdown {
            stage: Stage::II,
            intensity: g.item(intensity),
            ssim_or_grad: g.item(grad),
            total: g.item(total),
        },
    })
}

/// Stage-II intensity term of a plain image against two sources.
pub fn fusion_intensity(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    if fused.shape() != a.shape() || a.shape() != b.shape() {
        return Err(Error::dim(
            "fusion_intensity",
            format!("{:?}, {:?}, {:?}", fused.shape(), a.shape(), b.shape()),
        ));
    }
    let n = fused.len() as f64;
    Ok(fused
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(f, (x, y))| (f - x.max(*y)).abs())
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random01(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
    }

    fn ssim_of(x: &Tensor, y: &Tensor) -> f64 {
        let g = Graph::new();
        let s = ssim(&g, g.constant(x.clone()), g.constant(y.clone())).unwrap();
        g.item(s)
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (x, y) = (random01(&[1, 16, 14], 1), random01(&[1, 16, 14], 2));
        assert!((ssim_of(&x, &x) - 1.0).abs() < 1e-12);
        assert_eq!(ssim_of(&x, &y), ssim_of(&y, &x));
        let s = ssim_of(&x, &y);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_of_constants_is_closed_form() {
        let (a, b) = (0.3, 0.7);
        let got = ssim_of(&Tensor::full(&[1, 12, 12], a), &Tensor::full(&[1, 12, 12], b));
        let want = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 10, 12]));
        assert!(matches!(ssim(&g, a, a), Err(Error::Contract(_))));
        let b = g.constant(Tensor::zeros(&[1, 12, 12]));
        let c = g.constant(Tensor::zeros(&[1, 12, 13]));
        assert!(matches!(ssim(&g, b, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gaussian_window_is_normalised() {
        let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        assert!((k.sum() - 1.0).abs() < 1e-14);
        assert_eq!(k.data()[0], k.data()[120]);
    }

    #[test]
    fn stage1_perfect_and_constant_offset() {
        let g = Graph::new();
        let i = g.constant(random01(&[1, 12, 12], 3));
        let v = g.constant(random01(&[1, 12, 12], 4));
        let l = stage1_loss(&g, i, i, v, v).unwrap();
        assert!(l.breakdown.total.abs() < 1e-12);

        let c = 0.4;
        let base = g.constant(Tensor::full(&[1, 12, 12], c));
        let off = g.constant(Tensor::full(&[1, 12, 12], c + 0.1));
        let l = stage1_loss(&g, base, off, base, off).unwrap();
        let s = (2.0 * c * (c + 0.1) + SSIM_C1) / (c * c + (c + 0.1) * (c + 0.1) + SSIM_C1);
        assert!((l.breakdown.intensity - 0.02).abs() < 1e-12);
        assert!((l.breakdown.ssim_or_grad - 2.0 * (1.0 - s)).abs() < 1e-9);
        let b = l.breakdown;
        assert!((b.total - b.intensity - b.ssim_or_grad).abs() < 1e-15);
        assert_eq!(b.stage, Stage::I);
    }

    #[test]
    fn sobel_basics() {
        let g = Graph::new();
        let c = sobel_grad(&g, g.constant(Tensor::full(&[1, 5, 6], 0.25))).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
        let c = sobel_grad(&g, g.constant(Tensor::full(&[1, 5, 6], 0.3))).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v.abs() < 1e-15));

        let k = 3;
        let step = Tensor::from_fn(&[1, 6, 7], |i| if i % 7 >= k { 1.0 } else { 0.0 });
        let s = sobel_grad(&g, g.constant(step)).unwrap();
        let s = g.value(s).clone();
        for r in 1..5 {
            for col in 0..7 {
                let want = if col == k - 1 || col == k { 4.0 } else { 0.0 };
                assert_eq!(s.data()[r * 7 + col], want, "row {r} col {col}");
            }
        }

        let x = random01(&[1, 6, 5], 5);
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + 0.25);
        let (a, b) = (sobel_grad(&g, g.constant(x)).unwrap(), sobel_grad(&g, g.constant(shifted)).unwrap());
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-12);
        assert!(matches!(
            sobel_grad(&g, g.constant(Tensor::zeros(&[1, 2, 5]))),
            Err(Error::Contract(_))
        ));
    }

    /// Direct sobel with reflect padding, written as loops.
    fn sobel_oracle(x: &Tensor) -> Vec<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let k = sobel_kernels();
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = x.data()[refl(r as isize + dy as isize - 1, h) * w
                            + refl(c as isize + dx as isize - 1, w)];
                        gx += k.data()[dy * 3 + dx] * v;
                        gy += k.data()[9 + dy * 3 + dx] * v;
                    }
                }
                out[r * w + c] = gx.abs() + gy.abs();
            }
        }
        out
    }

    #[test]
    fn stage2_matches_elementwise_oracle() {
        let (f, a, b) = (random01(&[1, 8, 8], 6), random01(&[1, 8, 8], 7), random01(&[1, 8, 8], 8));
        let g = Graph::new();
        let l = stage2_loss(&g, g.constant(f.clone()), g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let n = 64.0;
        let inten: f64 = (0..64).map(|i| (f.data()[i] - a.data()[i].max(b.data()[i])).abs()).sum::<f64>() / n;
        let (sf, sa, sb) = (sobel_oracle(&f), sobel_oracle(&a), sobel_oracle(&b));
        let grad: f64 = (0..64).map(|i| (sf[i] - sa[i].max(sb[i])).abs()).sum::<f64>() / n;
        assert!((l.breakdown.intensity - inten).abs() < 1e-12);
        assert!((l.breakdown.ssim_or_grad - grad).abs() < 1e-12);
        assert!((l.breakdown.total - inten - grad).abs() < 1e-12);
        assert!((fusion_intensity(&f, &a, &b).unwrap() - inten).abs() < 1e-15);
    }

    #[test]
    fn stage2_degenerate_cases() {
        let (a, b) = (random01(&[1, 6, 6], 9), random01(&[1, 6, 6], 10));
        let g = Graph::new();
        let m = g.constant(elementwise_max(&a, &b));
        let l = stage2_loss(&g, m, g.constant(a.clone()), g.constant(b)).unwrap();
        assert_eq!(l.breakdown.intensity, 0.0);
        let av = g.constant(a);
        let l = stage2_loss(&g, av, av, av).unwrap();
        assert_eq!(l.breakdown.total, 0.0);
    }
}
